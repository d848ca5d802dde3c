"""Toy networks with named linear layers, activation taps and manual backprop.

Rows of every activation matrix are tokens.  An attention block mixes tokens
inside consecutive groups of ``seq_len`` rows, so batches are whole sequences.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

ACTIVATIONS = ("relu", "gelu", "tanh", "none")
_GELU_C = np.sqrt(2.0 / np.pi)


class NumericalError(ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""


class EmptyTapError(ValueError):
    """Raised when a batch leaves no unmasked rows to tap."""


@dataclass
class LinearLayer:
    name: str
    w: np.ndarray
    bias: np.ndarray | None = None
    frozen: bool = True

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise ValueError(f"{self.name}: weight must be 2-D")
        if not np.all(np.isfinite(self.w)):
            raise ValueError(f"{self.name}: weight has non-finite entries")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.w.shape[0],):
                raise ValueError(f"{self.name}: bias shape {self.bias.shape} != ({self.w.shape[0]},)")

    @property
    def in_features(self) -> int:
        return self.w.shape[1]

    @property
    def out_features(self) -> int:
        return self.w.shape[0]


@dataclass
class Dense:
    layer: LinearLayer
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def layers(self) -> list[LinearLayer]:
        return [self.layer]

    @property
    def in_features(self) -> int:
        return self.layer.in_features

    @property
    def out_features(self) -> int:
        return self.layer.out_features


@dataclass
class AttentionBlock:
    """Single-head self-attention; projections are named ``<name>.q/.k/.v/.o``."""

    q: LinearLayer
    k: LinearLayer
    v: LinearLayer
    o: LinearLayer
    seq_len: int = 4
    heads: int = 1

    def __post_init__(self):
        shapes = {l.w.shape for l in self.layers}
        if len(shapes) != 1:
            raise ValueError("attention projections must share one shape")
        (shape,) = shapes
        if shape[0] != shape[1]:
            raise ValueError("attention projections must be square")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")

    @classmethod
    def from_weights(cls, name: str, wq, wk, wv, wo, seq_len: int = 4) -> "AttentionBlock":
        return cls(*(LinearLayer(f"{name}.{s}", w) for s, w in zip("qkvo", (wq, wk, wv, wo))), seq_len=seq_len)

    @property
    def layers(self) -> list[LinearLayer]:
        return [self.q, self.k, self.v, self.o]

    @property
    def in_features(self) -> int:
        return self.q.in_features

    out_features = in_features


Block = Dense | AttentionBlock


@dataclass
class ToyNetwork:
    blocks: list

    def __post_init__(self):
        if not self.blocks:
            raise ValueError("network needs at least one block")
        for prev, nxt in zip(self.blocks, self.blocks[1:]):
            if prev.out_features != nxt.in_features:
                raise ValueError(f"dimension mismatch between blocks: {prev.out_features} -> {nxt.in_features}")
        names = [l.name for l in self.iter_layers()]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")

    @property
    def input_dim(self) -> int:
        return self.blocks[0].in_features

    @property
    def output_dim(self) -> int:
        return self.blocks[-1].out_features

    @property
    def seq_len(self) -> int:
        """Rows per sequence required by attention blocks (1 without attention)."""
        lens = {b.seq_len for b in self.blocks if isinstance(b, AttentionBlock)}
        if len(lens) > 1:
            raise ValueError("attention blocks disagree on seq_len")
        return lens.pop() if lens else 1

    def iter_layers(self) -> Iterator[LinearLayer]:
        for block in self.blocks:
            yield from block.layers

    def layers(self) -> dict[str, LinearLayer]:
        return {l.name: l for l in self.iter_layers()}

    def layer_names(self) -> list[str]:
        return [l.name for l in self.iter_layers()]

    def copy(self) -> "ToyNetwork":
        return copy.deepcopy(self)


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-D")
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same number of rows")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.inputs.shape[0],):
                raise ValueError("mask length must equal the number of rows")

    def __len__(self) -> int:
        return self.inputs.shape[0]


class Taps(dict):
    """Layer name -> activation rows fed to that layer."""

    @property
    def empty(self) -> bool:
        return any(v.shape[0] == 0 for v in self.values())


# --- elementwise nonlinearities -------------------------------------------

def _act(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "gelu":
        return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))
    return z


def _act_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return (z > 0).astype(np.float64)
    if kind == "tanh":
        return 1.0 - np.tanh(z) ** 2
    if kind == "gelu":
        u = _GELU_C * (z + 0.044715 * z**3)
        th = np.tanh(u)
        return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th**2) * _GELU_C * (1.0 + 3 * 0.044715 * z**2)
    return np.ones_like(z)


# --- forward / backward ---------------------------------------------------

def _linear(layer: LinearLayer, x: np.ndarray, adapters) -> np.ndarray:
    y = x @ layer.w.T
    if layer.bias is not None:
        y = y + layer.bias
    ad = adapters.get(layer.name) if adapters else None
    if ad is not None:
        y = y + ad.scaling * ((x @ ad.a.T) @ ad.b.T)
    return y


def _linear_backward(layer: LinearLayer, x: np.ndarray, dy: np.ndarray, adapters, grads: dict) -> np.ndarray:
    dx = dy @ layer.w
    if not layer.frozen:
        grads[f"{layer.name}.w"] = dy.T @ x
        if layer.bias is not None:
            grads[f"{layer.name}.bias"] = dy.sum(axis=0)
    ad = adapters.get(layer.name) if adapters else None
    if ad is not None:
        s = ad.scaling
        dyb = dy @ ad.b
        grads[f"{layer.name}.lora_b"] = s * (dy.T @ (x @ ad.a.T))
        grads[f"{layer.name}.lora_a"] = s * (dyb.T @ x)
        dx = dx + s * (dyb @ ad.a)
    return dx


def _softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_rows(net: ToyNetwork, x: np.ndarray) -> None:
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"expected inputs with {net.input_dim} columns, got shape {x.shape}")
    t = net.seq_len
    if x.shape[0] % t:
        raise ValueError(f"row count {x.shape[0]} is not a multiple of seq_len {t}")


def _forward(net: ToyNetwork, x: np.ndarray, adapters=None) -> tuple[np.ndarray, list]:
    """Run the network; the cache records what backward needs per block."""
    _check_rows(net, x)
    cache = []
    h = x
    for block in net.blocks:
        if isinstance(block, Dense):
            z = _linear(block.layer, h, adapters)
            cache.append(("dense", h, z))
            h = _act(block.activation, z)
        else:
            t, d = block.seq_len, block.in_features
            g = h.shape[0] // t
            q = _linear(block.q, h, adapters)
            k = _linear(block.k, h, adapters)
            v = _linear(block.v, h, adapters)
            q3, k3, v3 = (a.reshape(g, t, d) for a in (q, k, v))
            p = _softmax(q3 @ k3.transpose(0, 2, 1) / np.sqrt(d))
            o = (p @ v3).reshape(g * t, d)
            cache.append(("attn", h, (q3, k3, v3, p, o)))
            h = _linear(block.o, o, adapters)
    return h, cache


def _backward(net: ToyNetwork, cache: list, dout: np.ndarray, adapters=None) -> dict:
    grads: dict = {}
    dh = dout
    for block, (kind, x, extra) in zip(reversed(net.blocks), reversed(cache)):
        if kind == "dense":
            dz = dh * _act_grad(block.activation, extra)
            dh = _linear_backward(block.layer, x, dz, adapters, grads)
        else:
            q3, k3, v3, p, o = extra
            g, t, d = q3.shape
            do = _linear_backward(block.o, o, dh, adapters, grads).reshape(g, t, d)
            dp = do @ v3.transpose(0, 2, 1)
            dv = p.transpose(0, 2, 1) @ do
            ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) / np.sqrt(d)
            dq = ds @ k3
            dk = ds.transpose(0, 2, 1) @ q3
            dh = sum(
                _linear_backward(layer, x, dy.reshape(g * t, d), adapters, grads)
                for layer, dy in ((block.q, dq), (block.k, dk), (block.v, dv))
            )
    return grads


def layer_inputs(net: ToyNetwork, cache: list) -> dict[str, np.ndarray]:
    """Input rows seen by every linear layer, recovered from a forward cache."""
    out = {}
    for block, (kind, x, extra) in zip(net.blocks, cache):
        if kind == "dense":
            out[block.layer.name] = x
        else:
            for layer in (block.q, block.k, block.v):
                out[layer.name] = x
            out[block.o.name] = extra[4]
    return out


def forward(net: ToyNetwork, x, adapters=None) -> np.ndarray:
    return _forward(net, np.asarray(x, dtype=np.float64), adapters)[0]


def forward_with_taps(net: ToyNetwork, batch: Batch, tap_layers, adapters=None) -> tuple[np.ndarray, Taps]:
    """Forward pass that also returns the input rows of each layer in ``tap_layers``.

    Masked-out rows are dropped from the taps but still flow through the
    network.  ``taps.empty`` is true when the mask removes every row.
    """
    names = set(net.layer_names())
    unknown = set(tap_layers) - names
    if unknown:
        raise KeyError(f"unknown tap layers: {sorted(unknown)}")
    out, cache = _forward(net, batch.inputs, adapters)
    seen = layer_inputs(net, cache)
    taps = Taps()
    for name in net.layer_names():
        if name in tap_layers:
            rows = seen[name]
            taps[name] = rows[batch.mask] if batch.mask is not None else rows
    return out, taps


def loss_and_grad(out: np.ndarray, targets: np.ndarray, loss: str = "mse") -> tuple[float, np.ndarray]:
    if out.shape != targets.shape:
        raise ValueError(f"output shape {out.shape} != target shape {targets.shape}")
    if loss == "mse":
        diff = out - targets
        value = float(np.mean(diff * diff))
        grad = 2.0 * diff / diff.size
    elif loss == "cross_entropy":
        if np.any((targets != 0) & (targets != 1)) or np.any(targets.sum(axis=1) != 1):
            raise ValueError("cross_entropy needs one-hot target rows")
        shifted = out - out.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        value = float(-np.mean(np.sum(targets * logp, axis=1)))
        grad = (np.exp(logp) - targets) / out.shape[0]
    else:
        raise ValueError(f"unknown loss {loss!r}")
    if not np.isfinite(value):
        raise NumericalError(f"non-finite {loss} loss")
    return value, grad


def backward(net: ToyNetwork, batch: Batch, loss: str = "mse", adapters=None) -> tuple[float, dict]:
    """Mean loss and its gradients w.r.t. every trainable parameter.

    Keys are ``<layer>.w`` / ``<layer>.bias`` for unfrozen layers and
    ``<layer>.lora_a`` / ``<layer>.lora_b`` for attached adapters.
    """
    out, cache = _forward(net, batch.inputs, adapters)
    value, dout = loss_and_grad(out, batch.targets, loss)
    return value, _backward(net, cache, dout, adapters)


def preactivation_signs(net: ToyNetwork, x: np.ndarray, adapters=None) -> np.ndarray:
    """Concatenated sign pattern of every ReLU input; used to spot kinks."""
    _, cache = _forward(net, x, adapters)
    parts = [extra > 0 for block, (kind, _, extra) in zip(net.blocks, cache)
             if kind == "dense" and block.activation == "relu"]
    return np.concatenate([p.ravel() for p in parts]) if parts else np.zeros(0, dtype=bool)


# --- teacher / student task -----------------------------------------------

@dataclass(frozen=True)
class TaskConfig:
    """Synthetic fine-tuning task: a perturbed copy of a teacher network."""

    input_dim: int = 32
    width: int = 32
    output_dim: int = 8
    depth: int = 4
    attention: bool = True
    attention_after: int = 1
    seq_len: int = 4
    activation: str = "relu"
    z_dim: int = 4
    latent_decay: float = 0.5
    input_noise: float = 0.01
    perturbation: float = 0.15
    target_noise: float = 0.1

    def validate(self) -> None:
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if min(self.input_dim, self.width, self.output_dim, self.seq_len) < 1:
            raise ValueError("dimensions must be positive")
        if not 1 <= self.z_dim < self.input_dim:
            raise ValueError("need 1 <= z_dim < input_dim")
        if self.attention and not 0 <= self.attention_after <= self.depth - 1:
            raise ValueError("attention_after must index an interior position")
        if not 0 < self.latent_decay <= 1:
            raise ValueError("latent_decay must lie in (0, 1]")
        if min(self.input_noise, self.perturbation, self.target_noise) < 0:
            raise ValueError("noise scales must be non-negative")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def build_network(cfg: TaskConfig, rng: np.random.Generator) -> ToyNetwork:
    gain = np.sqrt(2.0) if cfg.activation == "relu" else 1.0
    dims = [cfg.input_dim] + [cfg.width] * (cfg.depth - 1) + [cfg.output_dim]
    blocks: list = []
    for i in range(cfg.depth):
        d, k = dims[i], dims[i + 1]
        last = i == cfg.depth - 1
        w = rng.standard_normal((k, d)) * (1.0 if last else gain) / np.sqrt(d)
        blocks.append(Dense(LinearLayer(f"fc{i}", w), "none" if last else cfg.activation))
        if cfg.attention and i == cfg.attention_after:
            ws = [rng.standard_normal((k, k)) / np.sqrt(k) for _ in range(4)]
            blocks.append(AttentionBlock.from_weights("attn", *ws, seq_len=cfg.seq_len))
    return ToyNetwork(blocks)


@dataclass
class DataGenerator:
    """Low-rank latent inputs ``x = G z + noise`` labelled by the teacher."""

    config: TaskConfig
    teacher: ToyNetwork
    mixing: np.ndarray

    @property
    def noise_floor(self) -> float:
        return self.config.target_noise**2

    def batch(self, rng: np.random.Generator, rows: int, mask_fraction: float = 0.0) -> Batch:
        cfg = self.config
        if rows < 1 or rows % cfg.seq_len and cfg.attention:
            raise ValueError(f"batch rows must be a positive multiple of seq_len={cfg.seq_len}")
        # latent factor j has scale decay**j so the input spectrum falls off sharply
        z = rng.standard_normal((rows, cfg.z_dim)) * cfg.latent_decay ** np.arange(cfg.z_dim)
        x = z @ self.mixing.T + cfg.input_noise * rng.standard_normal((rows, cfg.input_dim))
        y = forward(self.teacher, x) + cfg.target_noise * rng.standard_normal((rows, cfg.output_dim))
        mask = rng.random(rows) >= mask_fraction if mask_fraction > 0 else None
        return Batch(x, y, mask)

    def stream(self, rows: int, seed: int, mask_fraction: float = 0.0) -> Iterator[Batch]:
        rng = np.random.default_rng([seed, 0x5EED])
        while True:
            yield self.batch(rng, rows, mask_fraction)


def make_teacher_student(config: TaskConfig | None = None, seed: int = 0) -> tuple[ToyNetwork, ToyNetwork, DataGenerator]:
    """Teacher, frozen student (teacher plus Gaussian weight noise) and data source."""
    cfg = config or TaskConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    teacher = build_network(cfg, rng)
    mixing = rng.standard_normal((cfg.input_dim, cfg.z_dim))
    student = teacher.copy()
    for layer in student.iter_layers():
        layer.w = layer.w + cfg.perturbation * rng.standard_normal(layer.w.shape) / np.sqrt(layer.in_features)
        layer.frozen = True
    return teacher, student, DataGenerator(cfg, teacher, mixing)


def numeric_grads(net: ToyNetwork, batch: Batch, params: Mapping[str, np.ndarray], loss: str = "mse",
                  adapters=None, eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of the loss w.r.t. each array in ``params`` (perturbed in place)."""
    out = {}
    for key, arr in params.items():
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + eps
            lp = loss_and_grad(forward(net, batch.inputs, adapters), batch.targets, loss)[0]
            arr[idx] = orig - eps
            lm = loss_and_grad(forward(net, batch.inputs, adapters), batch.targets, loss)[0]
            arr[idx] = orig
            g[idx] = (lp - lm) / (2 * eps)
        out[key] = g
    return out


def trainable_params(net: ToyNetwork) -> dict[str, np.ndarray]:
    params = {}
    for layer in net.iter_layers():
        if not layer.frozen:
            params[f"{layer.name}.w"] = layer.w
            if layer.bias is not None:
                params[f"{layer.name}.bias"] = layer.bias
    return params
