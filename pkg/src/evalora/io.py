"""Binary and text file formats shared by every pipeline stage.

All integers and floats are little-endian.  Layouts::

    activation dump   "EVAD" u32 version=1 u32 n_layers
                      per layer: u16 len + utf-8 name, u64 rows, u64 cols,
                                 rows*cols f64 (row-major)

    checkpoint        "EVAC" u32 version=1, then the payload
                      f64 alpha, u8 measure, u32 rank_total, u32 n_layers,
                      per layer: u16 len + name, u32 rank, u64 samples_seen,
                                 u8 converged, u32 out_features, u32 in_features,
                                 rank f64 sigma, rank*in f64 A, out*rank f64 B
                      then u32 CRC-32 of the payload

    network           "EVAN" u32 version=1, then the payload
                      u32 n_blocks, per block: u8 kind (0 dense, 1 attention),
                      dense: u8 activation + layer; attention: u32 seq_len + 4 layers
                      layer: u16 len + name, u8 frozen, u32 rows, u32 cols,
                             rows*cols f64, u8 has_bias, [rows f64]
                      then u32 CRC-32 of the payload

Files are written to a temporary sibling and renamed into place.
"""
from __future__ import annotations

import dataclasses
import io as _io
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .net import ACTIVATIONS, AttentionBlock, Dense, LinearLayer, ToyNetwork

DUMP_MAGIC = b"EVAD"
CKPT_MAGIC = b"EVAC"
NET_MAGIC = b"EVAN"
VERSION = 1
MEASURE_TAGS = {"eva": 0, "raw": 1, "max": 2}


class FormatError(ValueError):
    code = 2


class BadMagicError(FormatError):
    code = 10


class VersionMismatchError(FormatError):
    code = 11


class TruncatedError(FormatError):
    code = 12


class ChecksumError(FormatError):
    code = 13


class ConfigError(FormatError):
    code = 14


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(raw)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        vals = struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))
        return vals[0] if len(vals) == 1 else vals

    def name(self) -> str:
        return self.take(self.unpack("H")).decode("utf-8")

    def floats(self, shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes")


def _name(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("name too long")
    return struct.pack("<H", len(raw)) + raw


def _floats(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def _header(r: _Reader, magic: bytes) -> None:
    got = r.take(4) if len(r.buf) >= 4 else None
    if got != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {got!r}")
    version = r.unpack("I")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported version {version}")


def _checked_payload(buf: bytes, magic: bytes) -> _Reader:
    r = _Reader(buf)
    _header(r, magic)
    if len(buf) < 12:
        raise TruncatedError("file too short for a checksum")
    payload, (crc,) = buf[8:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(payload) != crc:
        raise ChecksumError("CRC-32 mismatch")
    return _Reader(payload)


# --- activation dumps -------------------------------------------------------

def encode_dump(layers: Mapping[str, np.ndarray]) -> bytes:
    out = [DUMP_MAGIC, struct.pack("<II", VERSION, len(layers))]
    for name, a in layers.items():
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2:
            raise ValueError(f"{name}: activations must be 2-D")
        out += [_name(name), struct.pack("<QQ", *a.shape), _floats(a)]
    return b"".join(out)


def decode_dump(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    _header(r, DUMP_MAGIC)
    layers = {}
    for _ in range(r.unpack("I")):
        name = r.name()
        if name in layers:
            raise FormatError(f"duplicate layer {name!r}")
        rows, cols = r.unpack("QQ")
        layers[name] = r.floats((rows, cols))
    r.done()
    return layers


def write_dump(path, layers: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, encode_dump(layers))


def read_dump(path) -> dict[str, np.ndarray]:
    return decode_dump(Path(path).read_bytes())


# --- checkpoints ------------------------------------------------------------

@dataclass
class CheckpointLayer:
    name: str
    rank: int
    samples_seen: int
    converged: bool
    out_features: int
    in_features: int
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))
    a: np.ndarray | None = None
    b: np.ndarray | None = None


@dataclass
class EvaCheckpoint:
    alpha: float
    measure: str
    layers: list[CheckpointLayer]

    @property
    def rank_total(self) -> int:
        return sum(l.rank for l in self.layers)

    def adapters(self) -> dict:
        from .adapter import LoraAdapter

        return {l.name: LoraAdapter(l.name, l.a.copy(), l.b.copy(), self.alpha) for l in self.layers if l.rank}

    @property
    def ranks(self) -> dict[str, int]:
        return {l.name: l.rank for l in self.layers}

    @classmethod
    def build(cls, net, adapters: Mapping, alpha: float, measure: str = "eva",
              states: Mapping | None = None, layers=None) -> "EvaCheckpoint":
        """Collect adapters (and SVD statistics when available) for every layer in ``layers``."""
        host = net.layers() if isinstance(net, ToyNetwork) else dict(net)
        names = list(layers) if layers is not None else list(host)
        out = []
        for name in names:
            st = states.get(name) if states else None
            ad = adapters.get(name)
            rank = ad.rank if ad is not None else 0
            sigma = np.zeros(rank)
            if st is not None and rank:
                sigma[: min(rank, st.sigma.size)] = st.sigma[:rank]
            out.append(CheckpointLayer(
                name=name, rank=rank,
                samples_seen=st.samples_seen if st is not None else 0,
                converged=bool(st.converged) if st is not None else False,
                out_features=host[name].out_features, in_features=host[name].in_features,
                sigma=sigma,
                a=ad.a.copy() if ad is not None else None,
                b=ad.b.copy() if ad is not None else None,
            ))
        return cls(alpha=float(alpha), measure=measure, layers=out)


def encode_checkpoint(ckpt: EvaCheckpoint) -> bytes:
    if ckpt.measure not in MEASURE_TAGS:
        raise ValueError(f"unknown measure {ckpt.measure!r}")
    body = [struct.pack("<dBII", ckpt.alpha, MEASURE_TAGS[ckpt.measure], ckpt.rank_total, len(ckpt.layers))]
    for l in ckpt.layers:
        body += [_name(l.name), struct.pack("<IQBII", l.rank, l.samples_seen, int(l.converged),
                                            l.out_features, l.in_features)]
        if l.rank:
            shapes = ((l.rank,), (l.rank, l.in_features), (l.out_features, l.rank))
            for arr, shape in zip((l.sigma, l.a, l.b), shapes):
                if np.shape(arr) != shape:
                    raise ValueError(f"{l.name}: expected shape {shape}, got {np.shape(arr)}")
                body.append(_floats(arr))
    payload = b"".join(body)
    return CKPT_MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_checkpoint(buf: bytes) -> EvaCheckpoint:
    r = _checked_payload(buf, CKPT_MAGIC)
    alpha, tag, total, n = r.unpack("dBII")
    measures = {v: k for k, v in MEASURE_TAGS.items()}
    if tag not in measures:
        raise FormatError(f"unknown measure tag {tag}")
    layers = []
    for _ in range(n):
        name = r.name()
        rank, seen, conv, k, d = r.unpack("IQBII")
        layer = CheckpointLayer(name, rank, seen, bool(conv), k, d)
        if rank:
            layer.sigma = r.floats((rank,))
            layer.a = r.floats((rank, d))
            layer.b = r.floats((k, rank))
        layers.append(layer)
    r.done()
    ckpt = EvaCheckpoint(alpha=alpha, measure=measures[tag], layers=layers)
    if ckpt.rank_total != total:
        raise FormatError(f"rank total {ckpt.rank_total} != recorded {total}")
    return ckpt


def write_checkpoint(path, ckpt: EvaCheckpoint) -> None:
    atomic_write(path, encode_checkpoint(ckpt))


def read_checkpoint(path) -> EvaCheckpoint:
    return decode_checkpoint(Path(path).read_bytes())


# --- networks ---------------------------------------------------------------

def _encode_layer(l: LinearLayer) -> bytes:
    out = [_name(l.name), struct.pack("<BII", int(l.frozen), *l.w.shape), _floats(l.w)]
    out.append(struct.pack("<B", l.bias is not None))
    if l.bias is not None:
        out.append(_floats(l.bias))
    return b"".join(out)


def _decode_layer(r: _Reader) -> LinearLayer:
    name = r.name()
    frozen, rows, cols = r.unpack("BII")
    w = r.floats((rows, cols))
    bias = r.floats((rows,)) if r.unpack("B") else None
    return LinearLayer(name, w, bias, bool(frozen))


def encode_network(net: ToyNetwork) -> bytes:
    body = [struct.pack("<I", len(net.blocks))]
    for block in net.blocks:
        if isinstance(block, Dense):
            body += [struct.pack("<BB", 0, ACTIVATIONS.index(block.activation)), _encode_layer(block.layer)]
        else:
            body.append(struct.pack("<BI", 1, block.seq_len))
            body += [_encode_layer(l) for l in block.layers]
    payload = b"".join(body)
    return NET_MAGIC + struct.pack("<I", VERSION) + payload + struct.pack("<I", zlib.crc32(payload))


def decode_network(buf: bytes) -> ToyNetwork:
    r = _checked_payload(buf, NET_MAGIC)
    blocks = []
    for _ in range(r.unpack("I")):
        kind = r.unpack("B")
        if kind == 0:
            act = r.unpack("B")
            if act >= len(ACTIVATIONS):
                raise FormatError(f"unknown activation tag {act}")
            blocks.append(Dense(_decode_layer(r), ACTIVATIONS[act]))
        elif kind == 1:
            seq_len = r.unpack("I")
            q, k, v, o = (_decode_layer(r) for _ in range(4))
            blocks.append(AttentionBlock(q, k, v, o, seq_len=seq_len))
        else:
            raise FormatError(f"unknown block kind {kind}")
    r.done()
    return ToyNetwork(blocks)


def write_network(path, net: ToyNetwork) -> None:
    atomic_write(path, encode_network(net))


def read_network(path) -> ToyNetwork:
    return decode_network(Path(path).read_bytes())


# --- experiment config ------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    rank: int = 16
    rho: float = 1.0
    tau: float = 0.99
    delta: float = 1.0
    alpha: float = 1.0
    mode: str = "eva"
    seed: int = 0
    steps: int = 400
    lr: float | None = None
    optimizer: str = "adamw"
    batch_size: int = 64
    measure: str = "eva"
    whiten_exponent: float = 0.5
    mask: float = 0.0

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_CONFIG_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _coerce(key: str, value: str):
    kind = _CONFIG_TYPES[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "float | None":
            return None if value.lower() in ("", "none", "default") else float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None
    return value


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are rejected."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_TYPES:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, value)
    cfg = ExperimentConfig(**values)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    from .adapter import KINDS

    checks = [
        (cfg.rank >= 1, "rank must be >= 1"),
        (cfg.rho >= 1, "rho must be >= 1"),
        (0 < cfg.tau <= 1, "tau must lie in (0, 1]"),
        (0 < cfg.delta <= 1, "delta must lie in (0, 1]"),
        (cfg.mode in KINDS, f"mode must be one of {', '.join(KINDS)}"),
        (cfg.steps >= 1, "steps must be >= 1"),
        (cfg.lr is None or cfg.lr >= 0, "lr must be non-negative"),
        (cfg.optimizer in ("sgd", "adamw"), "optimizer must be sgd or adamw"),
        (cfg.batch_size >= 1, "batch_size must be >= 1"),
        (cfg.measure in MEASURE_TAGS, "measure must be eva, raw or max"),
        (cfg.whiten_exponent in (0.5, 1.0), "whiten_exponent must be 0.5 or 1.0"),
        (0 <= cfg.mask < 1, "mask must lie in [0, 1)"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {'default' if v is None else v}")
    return "\n".join(lines) + "\n"


def read_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


# --- metrics CSV ------------------------------------------------------------

def format_metrics_csv(records) -> str:
    buf = _io.StringIO(newline="")
    buf.write("step,loss,grad_norm\n")
    for rec in records:
        buf.write(f"{rec.step},{rec.loss:.17g},{rec.grad_norm:.17g}\n")
    return buf.getvalue()


def write_metrics_csv(path, records) -> None:
    atomic_write(path, format_metrics_csv(records))


def read_metrics_csv(path):
    from .train import StepRecord

    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "step,loss,grad_norm":
        raise FormatError("metrics CSV must start with 'step,loss,grad_norm'")
    out = []
    for line in lines[1:]:
        step, loss, gnorm = line.split(",")
        out.append(StepRecord(int(step), float(loss), float(gnorm)))
    return out
