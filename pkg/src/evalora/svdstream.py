"""Streaming estimation of the right-singular subspace of layer activations.

Each layer keeps a truncated summary ``(sigma, V)`` of every activation row
it has seen.  A new minibatch ``X`` is folded in by re-factoring
``[diag(sigma) V ; X]`` and keeping the top ``m`` triplets, which is exact
whenever the stream's rank does not exceed ``m``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping

import numpy as np

from .linalg import component_cosine_similarity, svd_randomized, svd_truncated
from .net import Batch, ToyNetwork, forward_with_taps

log = logging.getLogger(__name__)


def tracked_components(r: int, rho: float, d: int | None = None) -> int:
    """ceil(r * rho), guarded against float noise such as 10 * 1.1, capped at d."""
    m = math.ceil(r * rho - 1e-9)
    return min(m, d) if d is not None else m


@dataclass(frozen=True)
class StreamConfig:
    r: int = 16
    rho: float = 1.0
    tau: float = 0.99
    delta: float = 1.0
    max_batches: int = 500
    use_randomized: bool = False
    oversample: int = 5
    center: bool = False
    # "all" tracked components or only the first r must be stable
    convergence_scope: str = "all"
    seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.max_batches < 1:
            raise ValueError("max_batches must be >= 1")
        if self.convergence_scope not in ("all", "first_r"):
            raise ValueError("convergence_scope must be 'all' or 'first_r'")

    @property
    def m(self) -> int:
        return tracked_components(self.r, self.rho)


@dataclass(frozen=True)
class SvdState:
    layer: str
    d: int
    m: int
    v: np.ndarray = field(repr=False)
    sigma: np.ndarray
    samples_seen: int = 0
    updates: int = 0
    converged: bool = False
    last_similarity: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mean: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def empty(cls, layer: str, d: int, m: int, center: bool = False) -> "SvdState":
        m = min(m, d)
        if m < 1:
            raise ValueError("need at least one tracked component")
        return cls(layer=layer, d=d, m=m, v=np.zeros((0, d)), sigma=np.zeros(0),
                   mean=np.zeros(d) if center else None)

    @property
    def n_components(self) -> int:
        return self.sigma.size


def _factor(stacked: np.ndarray, k: int, randomized: bool, oversample: int, seed: int):
    if randomized:
        p = min(oversample, min(stacked.shape) - k)
        if p >= 0:
            return svd_randomized(stacked, k, oversample=p, seed=seed)
    return svd_truncated(stacked, k)


def svd_update(state: SvdState, x, *, randomized: bool = False, oversample: int = 5, seed: int = 0) -> SvdState:
    """Fold the rows of ``x`` into ``state``; returns a new state."""
    if state.converged:
        raise ValueError(f"{state.layer}: state is converged and frozen")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != state.d:
        raise ValueError(f"{state.layer}: expected rows of width {state.d}, got shape {x.shape}")
    if x.shape[0] == 0:
        raise ValueError(f"{state.layer}: empty batch")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{state.layer}: non-finite activations")

    n_old, n_new = state.samples_seen, x.shape[0]
    mean = state.mean
    if mean is not None:
        # incremental centering: add a row carrying the shift of the running mean
        batch_mean = x.mean(axis=0)
        parts = [state.sigma[:, None] * state.v, x - batch_mean]
        if n_old:
            parts.append(np.sqrt(n_old * n_new / (n_old + n_new)) * (mean - batch_mean)[None, :])
        mean = (n_old * mean + n_new * batch_mean) / (n_old + n_new)
    else:
        parts = [state.sigma[:, None] * state.v, x]
    stacked = np.vstack(parts)
    k = min(state.m, *stacked.shape)
    res = _factor(stacked, k, randomized, oversample, seed + state.updates)

    overlap = min(state.n_components, k)
    if overlap:
        sim = component_cosine_similarity(state.v[:overlap], res.vt[:overlap])
    else:
        sim = np.zeros(0)
    return replace(state, v=res.vt, sigma=res.sigma, samples_seen=n_old + n_new,
                   updates=state.updates + 1, last_similarity=sim, mean=mean)


def check_convergence(state: SvdState, tau: float, first: int | None = None) -> bool:
    """True when every checked component moved by less than ``tau`` in |cos|.

    All tracked components are checked unless ``first`` limits it to a prefix.
    A state that still tracks fewer than its target count is never converged.
    """
    if state.updates < 2:
        raise ValueError(f"{state.layer}: convergence needs at least two updates")
    if state.n_components < state.m or state.last_similarity.size < state.m:
        return False
    sim = state.last_similarity if first is None else state.last_similarity[:first]
    return bool(np.all(sim >= tau))


@dataclass
class InitPass:
    """Outcome of the streaming pass: per-layer states and batches consumed."""

    states: dict[str, SvdState]
    batches: int
    converged_at: dict[str, int]

    @property
    def all_converged(self) -> bool:
        return all(s.converged for s in self.states.values())

    @property
    def unconverged(self) -> list[str]:
        return [n for n, s in self.states.items() if not s.converged]


TapFn = Callable[[object, list], Mapping[str, np.ndarray]]


def stream_pass(items: Iterable, tap: TapFn, dims: Mapping[str, int], cfg: StreamConfig) -> InitPass:
    """Generic streaming loop: ``tap(item, names)`` returns activation rows per layer."""
    if not dims:
        raise ValueError("no layers to initialise")
    states = {n: SvdState.empty(n, d, tracked_components(cfg.r, cfg.rho, d), cfg.center) for n, d in dims.items()}
    first = None if cfg.convergence_scope == "all" else cfg.r
    converged_at: dict[str, int] = {}
    t = 0
    for item in items:
        active = [n for n, s in states.items() if not s.converged]
        taps = tap(item, active)
        if any(taps[n].shape[0] == 0 for n in active):
            log.debug("batch without unmasked rows skipped")
            continue
        t += 1
        for n in active:
            st = svd_update(states[n], taps[n], randomized=cfg.use_randomized,
                            oversample=cfg.oversample, seed=cfg.seed)
            if st.updates >= 2 and check_convergence(st, cfg.tau, first):
                st = replace(st, converged=True)
                converged_at[n] = t
            states[n] = st
        done = sum(s.converged for s in states.values())
        if done == len(states) or done / len(states) >= cfg.delta:
            break
        if t >= cfg.max_batches:
            log.info("max_batches=%d reached with %d/%d layers converged", cfg.max_batches, done, len(states))
            break
    if t == 0:
        raise ValueError("data stream exhausted before any update")
    return InitPass(states=states, batches=t, converged_at=converged_at)


def run_initialization_pass(net: ToyNetwork, data: Iterable[Batch], cfg: StreamConfig,
                            layers: Iterable[str] | None = None) -> InitPass:
    """Stream minibatches through ``net`` until the layers' subspaces converge.

    Converged layers are no longer tapped.  The pass stops once a fraction
    ``cfg.delta`` of the layers has converged or after ``cfg.max_batches``
    non-empty batches; remaining layers keep their current estimate and stay
    flagged unconverged.
    """
    all_layers = net.layers()
    names = list(all_layers) if layers is None else list(layers)
    unknown = set(names) - set(all_layers)
    if unknown:
        raise KeyError(f"unknown layers: {sorted(unknown)}")
    dims = {n: all_layers[n].in_features for n in names}

    def tap(batch: Batch, active: list) -> Mapping[str, np.ndarray]:
        return forward_with_taps(net, batch, set(active))[1]

    return stream_pass(data, tap, dims, cfg)


def matrix_batches(activations: Mapping[str, np.ndarray], rows: int) -> tuple[list, TapFn]:
    """Slice stored per-layer activation matrices into minibatches of ``rows`` rows."""
    if rows < 1:
        raise ValueError("rows must be >= 1")
    n = min(a.shape[0] for a in activations.values())
    starts = list(range(0, n, rows))

    def tap(start: int, active: list) -> Mapping[str, np.ndarray]:
        return {name: activations[name][start:start + rows] for name in active}

    return starts, tap
