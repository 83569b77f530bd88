"""Data-free model merging: task vectors, merging baselines and
interference-loss optimization of the merged vector."""

from .checkpoint import (
    Checkpoint,
    CompatReport,
    LoraAdapter,
    expand_lora,
    materialize_lora,
    read_checkpoint,
    validate_compat,
    write_checkpoint,
)
from .merging import (
    apply_dare,
    apply_merged,
    dare,
    iso_c,
    lambda_sweep,
    merge,
    task_arithmetic,
    ties_merge,
    tsv_merge,
    weight_average,
)
from .recipe import PRESETS, Init, MergeRecipe, Method, Optimizer
from .task_vectors import KeyKind, TaskVectorSet, classify_keys, compute_task_vectors
from .tensor import RankPolicy, frobenius_norm, matmul, rank_select, seeded_rng, svd
from .wudi import (
    LayerComponents,
    OptimReport,
    Variant,
    analytic_gradient,
    build_components,
    closed_form_solution,
    optimize_layer,
    wudi2_loss,
    wudi_loss,
)

__version__ = "0.1.0"
