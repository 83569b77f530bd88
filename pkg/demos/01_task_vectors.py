"""
Task vectors from a base and fine-tuned experts
================================================

A toy base model with two linear layers and a bias is perturbed into three
experts. Each expert minus the base is its task vector.
"""

import numpy as np

from taskmerge import Checkpoint, classify_keys, compute_task_vectors, seeded_rng
from taskmerge.task_vectors import magnitude_histogram, normalized_fro_by_layer

rng = seeded_rng(0)
base = Checkpoint({
    "layer0.weight": rng.standard_normal((16, 8)),
    "layer1.weight": rng.standard_normal((8, 16)),
    "layer1.bias": rng.standard_normal(8),
})

# each expert moves every tensor a little, with its own scale
experts = [
    Checkpoint({k: v + s * rng.standard_normal(v.shape) for k, v in base.items()})
    for s in (0.01, 0.02, 0.05)
]

print(classify_keys(dict(base.items())))

tv = compute_task_vectors(base, experts)
print("tasks:", tv.n_tasks, "keys:", tv.keys)
print("linear keys:", tv.linear_keys())

# the delta of expert 2 on layer0 is exactly the difference of the tensors
d = tv.deltas[2]["layer0.weight"]
print(np.array_equal(d, experts[2]["layer0.weight"] - base["layer0.weight"]))

# per-layer norm relative to the base weight grows with the expert scale
for task in range(tv.n_tasks):
    print(task, [(k, round(v, 4)) for k, v in normalized_fro_by_layer(tv, task)])

# magnitudes sit in the log bins around the perturbation scale
hist = magnitude_histogram(tv, task=0, bins=8)
print(hist.edges.round(8))
print(hist.aggregate)
