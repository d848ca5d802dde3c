# ---
# jupyter:
#   jupytext:
#     formats: ipynb,py:percent
#     text_representation:
#       extension: .py
#       format_name: percent
#       format_version: '1.3'
#   kernelspec:
#     display_name: Python 3
#     language: python
#     name: python3
# ---

# %% [markdown]
# # Rank allocation from explained variance
#
# Every tracked component gets the score `sigma_j^2 / ((M - 1) * sum(sigma))`.
# All components of all layers are sorted together and the top `N * r` are
# kept, so layers with more structure in their inputs receive more rank.
# `rho` controls how many candidates each layer offers: `ceil(r * rho)`.
# At `rho = 1` every layer offers exactly `r` and the allocation is uniform.

# %%
from pathlib import Path

import numpy as np

from evalora import plots
from evalora.alloc import explained_variance_ratio, l1_delta
from evalora.net import make_teacher_student
from evalora.pipeline import INIT_STREAM_OFFSET, allocation_matrix, rho_sweep

out = Path("demo_output")
out.mkdir(exist_ok=True)

# %% [markdown]
# ## The score on a small example

# %%
sigma = np.array([2.0, 1.0])
for measure in ("eva", "raw", "max"):
    print(f"{measure:>4}: {explained_variance_ratio(sigma, 3, measure)}")

# %% [markdown]
# ## Sweeping rho
#
# Each rho value runs its own streaming pass over an identical stream.

# %%
_, student, data = make_teacher_student(seed=0)
rhos = [1.0, 1.5, 2.0, 2.5, 3.0]
allocs = rho_sweep(student, lambda: data.stream(16, INIT_STREAM_OFFSET), r=4, rhos=rhos)
layers, mat = allocation_matrix(allocs, rhos)

print("layer    " + "  ".join(f"{r:>4}" for r in rhos))
for name, row in zip(layers, mat):
    print(f"{name:<8} " + "  ".join(f"{v:>4}" for v in row))
for a, b in zip(rhos, rhos[1:]):
    print(f"l1 delta {a} -> {b}: {l1_delta(allocs[a], allocs[b])}")

# %%
svg = plots.heatmap(mat, layers, [f"{r:g}" for r in rhos], "Rank per layer across rho")
(out / "rho_allocation.svg").write_text(svg)

# %% [markdown]
# The budget stays at `8 * 4 = 32` for every column. Rank moves toward the
# attention projections, whose shared input carries most of the latent signal,
# and away from the output side of the network.
