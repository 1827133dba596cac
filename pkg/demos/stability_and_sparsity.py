"""Sparsity identities and leave-one-out stability.

Dropping input columns and output rows with rate p zeroes each entry of
the merged update with probability 2p - p^2, so in expectation the masked
update norm is that fraction of the full one. Adding the matching penalty
to a convex objective makes it strongly convex, and leave-one-out loss
perturbations then shrink as the penalty grows.

Run with ``python demos/stability_and_sparsity.py``.
"""

# %%
import numpy as np

from lora_dropout_lab import entry_zero_probability
from lora_dropout_lab.theory import (
    LogisticProblem,
    entry_sparsity_check,
    generalization_bound,
    mc_masked_norm_check,
    random_lora_mlp,
    stability_probe,
)

delta = np.random.default_rng(0).normal(size=64)
for p in (0.1, 0.5, 0.9):
    r = mc_masked_norm_check(delta, p, 200_000)
    print(f"p={p}: mc {r.mc_estimate:.4f} vs closed form {r.closed_form:.4f} ({r.z_score:.2f} SE)")

layer = random_lora_mlp([12, 10], 4, seed=3).layers[0]
s = entry_sparsity_check(layer, 0.5, 50_000)
print(f"zero fraction {s.zero_fraction:.4f}, expected {entry_zero_probability(0.5):.4f}")

# %%
problem = LogisticProblem.random(n=50, d=4, K=2, seed=0)
for lam in (0.1, 1.0, 10.0):
    r = stability_probe(problem, lam, 0.5)
    print(f"lam={lam:>4}: max perturbation {r.max_observed:.3e} <= bound {r.beta_bound:.3e}")

# %%
for p in (0.0, 0.25, 0.5, 0.75, 0.95):
    print(f"p={p:.2f}: bound term {generalization_bound(2.0, 1.0, 0.0, 1.0, p, 64, 0.1):.4f}")

# %% [markdown]
# With no intrinsic curvature (``Lambda_min = 0``) the bound is infinite at
# ``p = 0``; every positive rate adds curvature and the term falls as p grows.
