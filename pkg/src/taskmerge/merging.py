"""Data-free merging baselines and application of the merged vector.

A merged vector is a plain ``{key: ndarray}`` dict over the task-vector
keys.  Sums always run in ascending task order with float64 accumulation,
so results do not depend on thread count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint, validate_compat
from .errors import ConfigError, IncompatibleCheckpointsError, MergeError, ShapeError
from .recipe import MergeRecipe, Method
from .task_vectors import TaskVectorSet
from .tensor import child_rng, svd
from .wudi import wudi_merge

log = logging.getLogger(__name__)


class LambdaSweepError(MergeError):
    def __init__(self, lam, cause):
        super().__init__(f"scorer failed at lambda={lam}: {cause!r}")
        self.lam = lam


def _sum(arrays, dtype=None) -> np.ndarray:
    arrays = list(arrays)
    acc = np.zeros(np.shape(arrays[0]))
    for a in arrays:
        acc += a
    return acc.astype(dtype or arrays[0].dtype)


def _map_keys(fn, keys, threads=1):
    if threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return dict(zip(keys, pool.map(fn, keys)))
    return {k: fn(k) for k in keys}


# -- linear interpolation -------------------------------------------------


def weight_average(experts) -> Checkpoint:
    """Elementwise mean of the experts over their shared keys.

    Computed as ``x_0 + sum(x_i - x_0) / n`` so that identical experts come
    back bit-identical.
    """
    experts = list(experts)
    if not experts:
        raise IncompatibleCheckpointsError("weight_average needs at least one checkpoint")
    if len(experts) == 1:
        return experts[0]
    report = validate_compat(experts)
    if report.shape_mismatches:
        key, shapes = report.shape_mismatches[0]
        raise IncompatibleCheckpointsError(f"shape mismatch for {key!r}: {shapes}")
    first = experts[0]
    out = {}
    for key in report.shared_keys:
        x0 = first[key].astype(np.float64)
        acc = np.zeros_like(x0)
        for e in experts[1:]:
            acc += e[key].astype(np.float64) - x0
        out[key] = x0 + acc / len(experts)
    return Checkpoint(out, first.metadata, {k: first.dtype_of(k) for k in out})


def task_arithmetic(tv: TaskVectorSet) -> dict:
    return {key: _sum(tv.taus(key)) for key in tv.keys}


# -- sparsification -------------------------------------------------------


def ties_tensor(taus, density: float) -> np.ndarray:
    """Trim to the top entries, elect a sign per entry, average the agreeing values."""
    if not 0.0 < density <= 1.0:
        raise ConfigError(f"TIES density must lie in (0, 1], got {density}")
    taus = [np.asarray(t) for t in taus]
    shape, dtype = taus[0].shape, taus[0].dtype
    count = taus[0].size
    keep = min(count, math.ceil(round(density * count, 9)))
    trimmed = np.zeros((len(taus), count))
    for i, t in enumerate(taus):
        flat = t.astype(np.float64).ravel()
        top = np.argsort(-np.abs(flat), kind="stable")[:keep]
        trimmed[i, top] = flat[top]
    total = np.zeros(count)
    for row in trimmed:
        total += row
    sign = np.where(total >= 0, 1.0, -1.0)
    agree = trimmed * sign > 0
    n_agree = agree.sum(axis=0)
    # mean as first agreeing value plus mean offset: exact for equal values
    first = trimmed[np.argmax(agree, axis=0), np.arange(count)]
    offset = np.zeros(count)
    for row, ok in zip(trimmed, agree):
        offset += np.where(ok, row - first, 0.0)
    out = np.where(n_agree > 0, first + offset / np.maximum(n_agree, 1), 0.0)
    return out.reshape(shape).astype(dtype)


def ties_merge(tv: TaskVectorSet, density: float = 0.2, threads: int = 1) -> dict:
    return _map_keys(lambda k: ties_tensor(tv.taus(k), density), tv.keys, threads)


def dare(tau, p: float, rng: np.random.Generator) -> np.ndarray:
    """Drop each entry with probability ``p`` and rescale survivors by ``1/(1-p)``."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"DARE drop rate must lie in [0, 1), got {p}")
    tau = np.asarray(tau)
    if p == 0.0:
        return tau.copy()
    keep = rng.random(tau.shape) >= p
    return np.where(keep, tau.astype(np.float64) / (1.0 - p), 0.0).astype(tau.dtype)


def apply_dare(tv: TaskVectorSet, p: float, seed: int) -> TaskVectorSet:
    """DARE on every task vector; stream ``(seed, task, key position)`` per tensor."""
    deltas = []
    for i, delta in enumerate(tv.deltas):
        deltas.append({key: dare(delta[key], p, child_rng(seed, i, j)) for j, key in enumerate(tv.keys)})
    return tv.with_deltas(deltas)


# -- SVD based ------------------------------------------------------------


def _procrustes(x: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal columns (rows, if wide): ``P Q^T``."""
    f = svd(x.astype(np.float64))
    return f.U @ f.V.T


def tsv_tensor(taus, warnings=None) -> np.ndarray:
    """Per-task rank-r truncation, decorrelated via orthogonal Procrustes.

    ``r = floor(min(m, n) / n_tasks)`` (at least 1); singular directions with
    a numerically zero singular value are not carried into the stacks.
    """
    taus = [np.asarray(t) for t in taus]
    m, n = taus[0].shape
    dtype = taus[0].dtype
    n_tasks = len(taus)
    r = min(m, n) // n_tasks
    if r < 1:
        r = 1
        msg = f"{n_tasks} tasks exceed min{(m, n)}; per-task rank clamped to 1"
        log.warning(msg)
        if warnings is not None:
            warnings.append(msg)
    us, ss, vs = [], [], []
    for t in taus:
        f = svd(t.astype(np.float64))
        if f.rank == 0 or f.S[0] == 0:
            continue
        tol = f.S[0] * max(m, n) * np.finfo(np.float64).eps
        k = min(r, int(np.count_nonzero(f.S > tol)))
        us.append(f.U[:, :k])
        ss.append(f.S[:k])
        vs.append(f.V[:, :k])
    if not ss:
        return np.zeros((m, n), dtype)
    u_perp = _procrustes(np.hstack(us))
    v_perp = _procrustes(np.hstack(vs))
    return ((u_perp * np.concatenate(ss)) @ v_perp.T).astype(dtype)


def iso_c_tensor(taus) -> np.ndarray:
    """Sum the task vectors, then replace the spectrum by its mean."""
    total = _sum([np.asarray(t) for t in taus], np.float64)
    f = svd(total)
    if f.rank == 0:
        return total.astype(np.asarray(taus[0]).dtype)
    return (f.S.mean() * (f.U @ f.V.T)).astype(np.asarray(taus[0]).dtype)


def _per_linear_key(tv, fn, threads):
    linear = set(tv.linear_keys())

    def one(key):
        return fn(tv.taus(key)) if key in linear else _sum(tv.taus(key))

    return _map_keys(one, tv.keys, threads)


def tsv_merge(tv: TaskVectorSet, threads: int = 1) -> dict:
    return _per_linear_key(tv, tsv_tensor, threads)


def iso_c(tv: TaskVectorSet, threads: int = 1) -> dict:
    return _per_linear_key(tv, iso_c_tensor, threads)


# -- application ----------------------------------------------------------


def apply_merged(base: Checkpoint, tm: dict, lam: float) -> Checkpoint:
    """``theta_0 + lam * tau_m`` per key, stored in the base's dtypes."""
    updates = {}
    for key, delta in tm.items():
        if key not in base:
            raise ShapeError(f"merged key {key!r} is not in the base checkpoint")
        if base[key].shape != np.shape(delta):
            raise ShapeError(f"{key!r}: merged shape {np.shape(delta)} != base shape {base[key].shape}")
        updates[key] = base[key].astype(np.float64) + lam * np.asarray(delta, dtype=np.float64)
    return base.replace(updates)


def lambda_sweep(base: Checkpoint, tm: dict, grid, scorer):
    """Score every ``lam`` in ``grid``; returns ``(best_lam, [(lam, score), ...])``.

    Higher scores win; ties go to the smaller ``lam``.
    """
    grid = [float(x) for x in grid]
    if not grid:
        raise ConfigError("lambda grid is empty")
    table = []
    for lam in grid:
        try:
            score = float(scorer(apply_merged(base, tm, lam)))
        except Exception as exc:
            raise LambdaSweepError(lam, exc) from exc
        table.append((lam, score))
    best = max(table, key=lambda row: (row[1], -row[0]))[0]
    return best, table


# -- dispatch -------------------------------------------------------------


@dataclass
class MergeResult:
    merged: dict
    reports: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


def merge(tv: TaskVectorSet, recipe: MergeRecipe, threads: int = 1) -> MergeResult:
    """Merged vector for ``recipe.method`` (DARE first when configured).

    For WeightAverage the result is the mean task vector, which reproduces
    the weight average when applied with ``lam = 1``.
    """
    if recipe.dare_rate:
        tv = apply_dare(tv, recipe.dare_rate, recipe.seed)
    method = recipe.method
    if method is Method.WEIGHT_AVERAGE:
        return MergeResult({k: (_sum(tv.taus(k), np.float64) / tv.n_tasks).astype(tv.deltas[0][k].dtype) for k in tv.keys})
    if method is Method.TASK_ARITHMETIC:
        return MergeResult(task_arithmetic(tv))
    if method is Method.TIES:
        return MergeResult(ties_merge(tv, recipe.ties_density, threads))
    if method is Method.TSV:
        warnings = []
        merged = _per_linear_key(tv, lambda taus: tsv_tensor(taus, warnings), threads)
        return MergeResult(merged, warnings=warnings)
    if method is Method.ISO_C:
        return MergeResult(iso_c(tv, threads))
    merged, reports = wudi_merge(tv, recipe, threads)
    return MergeResult(merged, reports)
