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
# # Adapter initialisation modes
#
# A LoRA adapter adds `(alpha / r) B A x` to a frozen layer. `B` always starts
# at zero, so the modes differ only in `A`:
#
# * `eva` copies the top right-singular vectors of the layer's activations
# * `eva_whiten` rescales those rows by `lambda_j^(-1/2)`
# * `eva_perm` and `eva_rot` shuffle or rotate them
# * `lora_redist` keeps the allocation but draws `A` at random
# * `weight_svd` uses the right-singular vectors of `W` itself
# * `random` is the usual uniform LoRA init at uniform rank

# %%
import numpy as np

from evalora.adapter import KINDS, InitMode, merge_network
from evalora.net import forward, make_teacher_student
from evalora.pipeline import INIT_STREAM_OFFSET, initialize
from evalora.svdstream import StreamConfig

_, student, data = make_teacher_student(seed=0)
stream = StreamConfig(r=4, rho=2)
x = next(data.stream(16, seed=0)).inputs

# %%
inits = {}
for kind in KINDS:
    mode = InitMode(kind, seed=3)
    batches = data.stream(16, INIT_STREAM_OFFSET) if mode.needs_states else None
    inits[kind] = initialize(student, mode, stream, batches)
    same = np.array_equal(forward(student, x, inits[kind].adapters), forward(student, x))
    ranks = [ad.rank for ad in inits[kind].adapters.values()]
    print(f"{kind:<12} ranks {ranks}  output unchanged at init: {same}")

# %% [markdown]
# ## What the ablations preserve

# %%
eva = inits["eva"].adapters["fc1"].a
whiten = inits["eva_whiten"].adapters["fc1"].a
rot = inits["eva_rot"].adapters["fc1"].a
unit = lambda a: a / np.linalg.norm(a, axis=1, keepdims=True)

print("eva rows orthonormal:", np.allclose(eva @ eva.T, np.eye(len(eva))))
print("whitened row norms:", np.round(np.linalg.norm(whiten, axis=1), 3))
print("whitened directions match eva:", np.allclose(unit(whiten), eva))
print("rotation keeps the Gram matrix:", np.allclose(rot @ rot.T, eva @ eva.T))

# %% [markdown]
# ## Merging
#
# After training, `W + (alpha / r) B A` replaces the adapter with no change in
# output.

# %%
adapters = inits["eva"].adapters
for ad in adapters.values():
    ad.b = 0.05 * np.random.default_rng(0).standard_normal(ad.b.shape)
merged = merge_network(student, adapters)
print("max |merged - adapted|:", np.abs(forward(merged, x) - forward(student, x, adapters)).max())
