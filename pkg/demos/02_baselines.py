"""
Merging baselines on one layer
==============================

Weight averaging, task arithmetic, TIES, DARE, TSV and Iso-C applied to
three task vectors that share a low-rank direction.
"""

import numpy as np

from taskmerge import Checkpoint, MergeRecipe, Method, apply_merged, compute_task_vectors, frobenius_norm, merge, seeded_rng

rng = seeded_rng(1)
shared = rng.standard_normal((32, 1)) @ rng.standard_normal((1, 32))
base = Checkpoint({"w.weight": rng.standard_normal((32, 32))})
experts = [
    Checkpoint({"w.weight": base["w.weight"] + 0.1 * (shared + rng.standard_normal((32, 32)))})
    for _ in range(3)
]
tv = compute_task_vectors(base, experts)
ta = sum(tv.taus("w.weight"))

for method in [Method.WEIGHT_AVERAGE, Method.TASK_ARITHMETIC, Method.TIES, Method.TSV, Method.ISO_C]:
    tm = merge(tv, MergeRecipe(method=method)).merged["w.weight"]
    cos = float(np.sum(tm * ta) / (frobenius_norm(tm) * frobenius_norm(ta)))
    print(f"{method.value:16s} norm {frobenius_norm(tm):8.4f}  cos to TA {cos:+.4f}")

# DARE drops 30% of entries and rescales the rest, so the sum is kept on average
recipe = MergeRecipe(method=Method.TASK_ARITHMETIC, dare_rate=0.3, seed=0)
tm = merge(tv, recipe).merged["w.weight"]
print("dare+ta rel. diff to ta:", frobenius_norm(tm - ta) / frobenius_norm(ta))

# Iso-C has a flat spectrum
s = np.linalg.svd(merge(tv, MergeRecipe(method=Method.ISO_C)).merged["w.weight"], compute_uv=False)
print("iso-c singular values:", s[:4].round(6), "...")

# the merged vector is added back to the base with a scale lam
merged = apply_merged(base, {"w.weight": ta}, lam=0.3)
print(np.allclose(merged["w.weight"], base["w.weight"] + 0.3 * ta))
