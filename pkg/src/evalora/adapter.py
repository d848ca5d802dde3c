"""Low-rank adapters and their initialisation modes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .alloc import RankAllocation
from .linalg import random_orthogonal, svd_truncated
from .net import ToyNetwork

KINDS = ("eva", "eva_whiten", "eva_perm", "eva_rot", "lora_redist", "weight_svd", "random")
_SEEDED = ("eva_perm", "eva_rot", "lora_redist", "random")
_NEEDS_STATES = ("eva", "eva_whiten", "eva_perm", "eva_rot", "lora_redist")


@dataclass
class LoraAdapter:
    layer: str
    a: np.ndarray
    b: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ValueError(f"{self.layer}: incompatible adapter shapes A{self.a.shape} B{self.b.shape}")
        if self.rank < 1:
            raise ValueError(f"{self.layer}: adapter rank must be >= 1")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.layer, self.a.copy(), self.b.copy(), self.alpha)


@dataclass(frozen=True)
class InitMode:
    kind: str = "eva"
    seed: int | None = None
    whiten_exponent: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown init mode {self.kind!r}")
        if self.whiten_exponent not in (0.5, 1.0):
            raise ValueError("whiten_exponent must be 0.5 or 1.0")

    @property
    def needs_states(self) -> bool:
        return self.kind in _NEEDS_STATES


def _layer_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _uniform_a(rng: np.random.Generator, rank: int, d: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(d)
    return rng.uniform(-bound, bound, size=(rank, d))


def init_adapters(net: ToyNetwork | Mapping, states: Mapping | None, allocation: RankAllocation | None,
                  mode: InitMode, alpha: float = 1.0, rank: int | None = None) -> dict[str, LoraAdapter]:
    """Build one adapter per layer with a nonzero rank; ``B`` always starts at zero.

    State-driven modes take ranks from ``allocation``.  The ``random`` and
    ``weight_svd`` baselines use a uniform ``rank`` (default ``allocation.r``)
    over every linear layer of ``net``.  ``net`` may also be a plain mapping
    of layer name to LinearLayer when there is no network around the hosts.
    """
    if mode.kind in _SEEDED and mode.seed is None:
        raise ValueError(f"mode {mode.kind} needs a seed")
    layers = net.layers() if isinstance(net, ToyNetwork) else dict(net)
    index = {n: i for i, n in enumerate(layers)}
    if mode.needs_states:
        if states is None or allocation is None:
            raise ValueError(f"mode {mode.kind} needs SVD states and an allocation")
        missing = set(allocation.ranks) - set(states)
        if missing:
            raise ValueError(f"allocation names layers without states: {sorted(missing)}")
        ranks = dict(allocation.ranks)
    else:
        r = rank if rank is not None else (allocation.r if allocation is not None else None)
        if not r:
            raise ValueError(f"mode {mode.kind} needs a rank")
        ranks = {n: r for n in layers}

    adapters = {}
    for name, k in ranks.items():
        if k == 0:
            continue
        if name not in layers:
            raise KeyError(f"unknown layer {name!r}")
        layer = layers[name]
        d = layer.in_features
        if mode.needs_states:
            st = states[name]
            if k > st.n_components:
                raise ValueError(f"{name}: rank {k} exceeds {st.n_components} tracked components")
            a = st.v[:k].copy()
            if mode.kind == "eva_whiten":
                eig = st.sigma[:k] ** 2 / (st.samples_seen - 1)
                if np.any(eig <= 0):
                    raise ValueError(f"{name}: cannot whiten a zero-variance component")
                a *= (eig ** -mode.whiten_exponent)[:, None]
            elif mode.kind == "eva_perm":
                a = a[_layer_rng(mode.seed, index[name]).permutation(k)]
            elif mode.kind == "eva_rot":
                a = a @ random_orthogonal(d, mode.seed + 7919 * index[name])
            elif mode.kind == "lora_redist":
                a = _uniform_a(_layer_rng(mode.seed, index[name]), k, d)
        elif mode.kind == "weight_svd":
            k = min(k, *layer.w.shape)
            a = svd_truncated(layer.w, k).vt
        else:
            a = _uniform_a(_layer_rng(mode.seed, index[name]), k, d)
        adapters[name] = LoraAdapter(name, a, np.zeros((layer.out_features, a.shape[0])), alpha)
    return adapters


def adapter_forward(w, adapter: LoraAdapter, x) -> np.ndarray:
    """``W x + (alpha / r) B A x`` for a vector, or row-wise for a matrix of inputs."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.shape != (adapter.b.shape[0], adapter.a.shape[1]):
        raise ValueError(f"host weight {w.shape} does not fit adapter {adapter.b.shape[0]}x{adapter.a.shape[1]}")
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != {w.shape[1]}")
    if x.ndim == 1:
        return w @ x + adapter.scaling * (adapter.b @ (adapter.a @ x))
    return x @ w.T + adapter.scaling * ((x @ adapter.a.T) @ adapter.b.T)


def merge(w, adapter: LoraAdapter) -> np.ndarray:
    """Fold the adapter into its host weight: ``W + (alpha / r) B A``."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (adapter.b.shape[0], adapter.a.shape[1]):
        raise ValueError(f"host weight {w.shape} does not fit adapter {adapter.b.shape[0]}x{adapter.a.shape[1]}")
    return w + adapter.scaling * (adapter.b @ adapter.a)


def merge_network(net: ToyNetwork, adapters: Mapping[str, LoraAdapter]) -> ToyNetwork:
    merged = net.copy()
    layers = merged.layers()
    for name, ad in adapters.items():
        layers[name].w = merge(layers[name].w, ad)
    return merged


def adapter_params(adapters: Mapping[str, LoraAdapter]) -> dict[str, np.ndarray]:
    """Gradient-key -> array view of every adapter parameter."""
    params = {}
    for name, ad in adapters.items():
        params[f"{name}.lora_a"] = ad.a
        params[f"{name}.lora_b"] = ad.b
    return params
