"""Explained-variance scores and global rank redistribution."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

MEASURES = ("eva", "raw", "max")


def explained_variance_ratio(sigma, m_samples: int, measure: str = "eva") -> np.ndarray:
    """Per-component score used to rank components across layers.

    ``eva``: sigma_j^2 / ((M - 1) * sum(sigma)), ``raw``: sigma_j^2 / (M - 1),
    ``max``: sigma_j^2 / max(sigma)^2.  The ``eva`` score does not sum to one.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim != 1 or s.size == 0:
        raise ValueError("sigma must be a non-empty vector")
    if np.any(s < 0) or not np.all(np.isfinite(s)):
        raise ValueError("sigma must be finite and non-negative")
    if m_samples < 2:
        raise ValueError("need at least two samples")
    if not np.any(s > 0):
        raise ValueError("all singular values are zero")
    sq = s * s
    if measure == "eva":
        return sq / ((m_samples - 1) * s.sum())
    if measure == "raw":
        return sq / (m_samples - 1)
    if measure == "max":
        return sq / s.max() ** 2
    raise ValueError(f"unknown measure {measure!r}")


@dataclass(frozen=True)
class RankAllocation:
    ranks: dict[str, int]
    budget: int
    measure: str = "eva"
    r: int = 0
    rho: float = 1.0
    scores: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def total(self) -> int:
        return sum(self.ranks.values())

    def to_csv(self) -> str:
        return "layer,rank\n" + "".join(f"{n},{k}\n" for n, k in self.ranks.items())


def uniform_allocation(layers, r: int) -> RankAllocation:
    layers = list(layers)
    return RankAllocation(ranks={n: r for n in layers}, budget=r * len(layers), measure="eva", r=r, rho=1.0)


def redistribute_ranks(states: Mapping, r: int, rho: float = 1.0, measure: str = "eva") -> RankAllocation:
    """Keep the top ``N * r`` components by score across all layers.

    Ties are broken by component index first and layer position second, so
    equal scores spread ranks evenly instead of filling the first layer.
    The result does not depend on the order of ``states`` beyond that key.
    """
    if not states:
        raise ValueError("no states to allocate over")
    if r < 1 or rho < 1:
        raise ValueError("need r >= 1 and rho >= 1")
    names = list(states)
    budget = len(names) * r
    scores = {n: explained_variance_ratio(states[n].sigma, states[n].samples_seen, measure) for n in names}
    # stable layer key independent of enumeration order
    layer_key = {n: i for i, n in enumerate(sorted(names))}
    entries = [(-float(xi), j, layer_key[n], n) for n in names for j, xi in enumerate(scores[n])]
    total = len(entries)
    if budget > total:
        warnings.warn(f"rank budget {budget} exceeds {total} tracked components; allocating all", RuntimeWarning)
    entries.sort(key=lambda e: e[:3])
    ranks = {n: 0 for n in names}
    for *_, n in entries[:budget]:
        ranks[n] += 1
    return RankAllocation(ranks=ranks, budget=budget, measure=measure, r=r, rho=rho, scores=scores)


def allocation_delta(a: RankAllocation, b: RankAllocation) -> dict[str, int]:
    """Per-layer ``b - a``."""
    if set(a.ranks) != set(b.ranks):
        raise ValueError("allocations cover different layers")
    return {n: b.ranks[n] - a.ranks[n] for n in a.ranks}


def l1_delta(a: RankAllocation, b: RankAllocation) -> int:
    return sum(abs(v) for v in allocation_delta(a, b).values())
