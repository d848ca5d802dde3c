"""End-to-end helpers shared by the CLI, the comparison harness and the demos."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .adapter import InitMode, LoraAdapter, init_adapters
from .alloc import RankAllocation, redistribute_ranks, uniform_allocation
from .net import LinearLayer, ToyNetwork
from .svdstream import InitPass, StreamConfig, matrix_batches, run_initialization_pass, stream_pass

# offset between the init-pass stream seed and the training stream seed
INIT_STREAM_OFFSET = 104729


@dataclass
class InitResult:
    adapters: dict[str, LoraAdapter]
    allocation: RankAllocation
    pass_result: InitPass | None
    seconds: float

    @property
    def batches(self) -> int:
        return self.pass_result.batches if self.pass_result else 0

    @property
    def states(self) -> dict:
        return self.pass_result.states if self.pass_result else {}


def initialize(hosts: ToyNetwork | Mapping[str, LinearLayer], mode: InitMode, stream: StreamConfig,
               batches: Iterable | None = None, *, tap=None, measure: str = "eva",
               alpha: float = 1.0) -> InitResult:
    """Streaming SVD pass, rank redistribution and adapter construction.

    With a ToyNetwork, ``batches`` are Batch objects pushed through it.  For
    precomputed activations pass ``batches`` and a ``tap`` callable as
    returned by :func:`svdstream.matrix_batches`.  Baseline modes skip the
    SVD pass entirely.
    """
    t0 = time.perf_counter()
    layers = hosts.layers() if isinstance(hosts, ToyNetwork) else dict(hosts)
    res = None
    if mode.needs_states:
        if batches is None:
            raise ValueError(f"mode {mode.kind} needs activation batches")
        if tap is None:
            res = run_initialization_pass(hosts, batches, stream)
        else:
            dims = {n: l.in_features for n, l in layers.items()}
            res = stream_pass(batches, tap, dims, stream)
        allocation = redistribute_ranks(res.states, stream.r, stream.rho, measure)
    else:
        allocation = uniform_allocation(layers, stream.r)
    adapters = init_adapters(layers, res.states if res else None, allocation, mode, alpha=alpha, rank=stream.r)
    return InitResult(adapters, allocation, res, time.perf_counter() - t0)


def activation_hosts(activations: Mapping[str, np.ndarray], net: ToyNetwork | None = None) -> dict[str, LinearLayer]:
    """Host layers for stored activations: matching network layers, else square zero stand-ins."""
    known = net.layers() if net is not None else {}
    hosts = {}
    for name, a in activations.items():
        d = a.shape[1]
        layer = known.get(name)
        if layer is not None and layer.in_features == d:
            hosts[name] = layer
        else:
            hosts[name] = LinearLayer(name, np.zeros((d, d)))
    return hosts


def initialize_from_activations(activations: Mapping[str, np.ndarray], mode: InitMode, stream: StreamConfig,
                                rows: int, net: ToyNetwork | None = None, measure: str = "eva",
                                alpha: float = 1.0) -> InitResult:
    starts, tap = matrix_batches(activations, rows)
    return initialize(activation_hosts(activations, net), mode, stream, starts, tap=tap,
                      measure=measure, alpha=alpha)


def rho_sweep(net: ToyNetwork, make_batches, r: int, rhos: Sequence[float], stream: StreamConfig | None = None,
              measure: str = "eva") -> dict[float, RankAllocation]:
    """Allocation for each rho; ``make_batches()`` must return a fresh, identical stream per call."""
    base = stream or StreamConfig(r=r)
    out = {}
    for rho in rhos:
        if rho < 1:
            raise ValueError("rho must be >= 1")
        if rho in out:
            continue
        res = run_initialization_pass(net, make_batches(), replace(base, r=r, rho=rho))
        out[rho] = redistribute_ranks(res.states, r, rho, measure)
    return out


def allocation_matrix(allocs: Mapping[float, RankAllocation], rhos: Sequence[float]) -> tuple[list[str], np.ndarray]:
    layers = list(next(iter(allocs.values())).ranks)
    m = np.array([[allocs[rho].ranks[n] for rho in rhos] for n in layers], dtype=int)
    return layers, m
