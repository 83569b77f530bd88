"""Layer-wise optimization of the merged vector under interference losses.

Every loss here has the form

    L(tm) = sum_i w_i * ||(tm - A_i) @ B_i||_F**2

with per-task target ``A_i`` (m x n), input-subspace matrix ``B_i`` (n x k_i)
and weight ``w_i = 1 / ||tau_i||_F**2``.  The variants differ only in how
``A_i`` and ``B_i`` are built:

* ``Variant.WUDI``: ``A_i = tau_i`` and ``B_i = tau_i.T``.
* ``Variant.FULL``: SVD of the centered ``tau_i - mean``, truncated to rank k;
  ``A_i = U_k S_k V_k^T + mean`` and ``B_i = V_k S_k``.
* ``Variant.LORA``: the same without centering.

The loss is quadratic, so the gradient ``sum_i 2 w_i (tm - A_i) B_i B_i^T``
is exact and a dense linear solve gives the minimizer (used as a test
oracle; the merge itself runs plain gradient descent).
"""

from __future__ import annotations

import csv
import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLayerError, DivergenceError, NonFiniteGradientError, ShapeError
from .recipe import Init, MergeRecipe, Method, Optimizer
from .tensor import RankPolicy, compute_dtype, frobenius_norm, rank_select, svd

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e3


class Variant(str, enum.Enum):
    WUDI = "Wudi"
    FULL = "FullFT"
    LORA = "Lora"


VARIANT_FOR_METHOD = {
    Method.WUDI: Variant.WUDI,
    Method.WUDI_V2_FULL: Variant.FULL,
    Method.WUDI_V2_LORA: Variant.LORA,
}


def _sq_norm(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.sum(x * x))


def wudi_loss(tm, taus) -> float:
    """Interference loss using each task vector's transpose as its input proxy."""
    tm = np.asarray(tm)
    total = 0.0
    for tau in taus:
        tau = np.asarray(tau)
        if tau.shape != tm.shape:
            raise ShapeError(f"task vector shape {tau.shape} != merged shape {tm.shape}")
        norm2 = _sq_norm(tau)
        if norm2 == 0:
            continue
        dt = compute_dtype(tm, tau)
        total += _sq_norm((tm.astype(dt) - tau.astype(dt)) @ tau.astype(dt).T) / norm2
    return total


@dataclass
class LayerComponents:
    targets: list
    inputs: list
    weights: list
    mean: np.ndarray
    ranks: list
    variant: Variant = Variant.FULL
    excluded: list = field(default_factory=list)

    def __post_init__(self):
        self.grams = [b @ b.T for b in self.inputs]

    @property
    def shape(self):
        return self.mean.shape

    @property
    def dtype(self):
        return self.mean.dtype

    def lipschitz(self) -> float:
        """``2 * sum_i w_i * sigma_max(B_i B_i^T)``, a bound on the gradient's Lipschitz constant."""
        total = 0.0
        for w, g in zip(self.weights, self.grams):
            if g.size:
                total += w * float(np.linalg.eigvalsh(g.astype(np.float64))[-1])
        return 2.0 * total


def task_mean(taus, dtype) -> np.ndarray:
    """Mean as ``tau_0 + sum(tau_i - tau_0) / n`` in float64; exact when all tasks agree."""
    first = np.asarray(taus[0], dtype=np.float64)
    acc = np.zeros(first.shape)
    for t in taus[1:]:
        acc += np.asarray(t, dtype=np.float64) - first
    return (first + acc / len(taus)).astype(dtype)


def _norms_and_active(taus):
    norms = [frobenius_norm(t) for t in taus]
    excluded = [i for i, n in enumerate(norms) if n == 0]
    for i in excluded:
        log.warning("task %d has a zero task vector; excluded from the loss", i)
    if len(excluded) == len(taus):
        raise DegenerateLayerError("all task vectors are zero")
    return norms, excluded


def wudi_components(taus) -> LayerComponents:
    """Components that make the generic loss equal :func:`wudi_loss`."""
    dt = compute_dtype(*taus)
    taus = [np.asarray(t, dtype=dt) for t in taus]
    norms, excluded = _norms_and_active(taus)
    keep = [i for i in range(len(taus)) if i not in excluded]
    m, n = taus[0].shape
    return LayerComponents(
        targets=[taus[i] for i in keep],
        inputs=[taus[i].T for i in keep],
        weights=[1.0 / norms[i] ** 2 for i in keep],
        mean=np.zeros((m, n), dt),
        ranks=[min(m, n)] * len(keep),
        variant=Variant.WUDI,
        excluded=excluded,
    )


def build_components(taus, variant=Variant.FULL, rank_policy=None, centered=None) -> LayerComponents:
    """Low-rank targets and input subspaces for the improved loss.

    ``centered`` defaults to True for the full fine-tuning variant and False
    for LoRA; passing it explicitly keeps the mean subtraction either way.
    """
    variant = Variant(variant)
    if variant is Variant.WUDI:
        return wudi_components(taus)
    rank_policy = rank_policy or RankPolicy()
    if centered is None:
        centered = variant is Variant.FULL
    dt = compute_dtype(*taus)
    taus = [np.asarray(t, dtype=dt) for t in taus]
    shapes = {t.shape for t in taus}
    if len(shapes) != 1 or len(taus[0].shape) != 2:
        raise ShapeError(f"task vectors must share one 2-D shape, got {sorted(shapes)}")
    norms, excluded = _norms_and_active(taus)

    if centered:
        mean = task_mean(taus, dt)
    else:
        mean = np.zeros(taus[0].shape, dt)

    targets, inputs, weights, ranks = [], [], [], []
    for i, tau in enumerate(taus):
        if i in excluded:
            continue
        f = svd(tau - mean)
        k = rank_select(f.S, rank_policy)
        f = f.truncate(k)
        targets.append(((f.U * f.S) @ f.V.T + mean).astype(dt))
        inputs.append((f.V * f.S).astype(dt))
        weights.append(1.0 / norms[i] ** 2)
        ranks.append(k)
    return LayerComponents(targets, inputs, weights, mean, ranks, variant, excluded)


def wudi2_loss(tm, comps: LayerComponents) -> float:
    tm = np.asarray(tm, dtype=comps.dtype)
    total = 0.0
    for a, b, w in zip(comps.targets, comps.inputs, comps.weights):
        if b.shape[1]:
            total += w * _sq_norm((tm - a) @ b)
    return total


def analytic_gradient(tm, comps: LayerComponents) -> np.ndarray:
    tm = np.asarray(tm, dtype=comps.dtype)
    grad = np.zeros(tm.shape, dtype=np.float64)
    for a, g, w in zip(comps.targets, comps.grams, comps.weights):
        if g.size:
            grad += (2.0 * w) * ((tm - a) @ g)
    return grad.astype(comps.dtype)


def closed_form_solution(comps: LayerComponents) -> np.ndarray:
    """Minimizer of the quadratic loss by a float64 dense solve.

    Solves ``tm @ H = R`` with ``H = sum w_i B_i B_i^T`` and
    ``R = sum w_i A_i B_i B_i^T``; a ridge of ``1e-8 * trace(H) / n`` is added
    when ``H`` is singular.
    """
    n = comps.shape[1]
    h = np.zeros((n, n))
    r = np.zeros(comps.shape)
    for a, g, w in zip(comps.targets, comps.grams, comps.weights):
        g = g.astype(np.float64)
        h += w * g
        r += w * (a.astype(np.float64) @ g)
    trace = float(np.trace(h))
    if trace == 0.0:
        return np.zeros(comps.shape)
    eig = np.linalg.eigvalsh(h)
    if eig[0] <= 1e-12 * eig[-1]:
        h = h + (1e-8 * trace / n) * np.eye(n)
    return np.linalg.solve(h, r.T).T


# -- optimizers -----------------------------------------------------------


@dataclass
class OptimizerState:
    kind: Optimizer = Optimizer.SGD
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def optimizer_step(state: OptimizerState, param: np.ndarray, grad: np.ndarray, where: str = "") -> np.ndarray:
    """One SGD or bias-corrected Adam update; returns the new parameters."""
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradientError(f"non-finite gradient {where}".rstrip())
    state.t += 1
    if Optimizer(state.kind) is Optimizer.SGD:
        return param - state.lr * grad
    if state.m is None:
        state.m = np.zeros_like(grad)
        state.v = np.zeros_like(grad)
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class OptimReport:
    name: str
    initial_loss: float
    initial_norm: float
    loss_history: list = field(default_factory=list)
    norm_history: list = field(default_factory=list)
    final_grad_norm: float = 0.0
    ranks: list = field(default_factory=list)
    excluded: list = field(default_factory=list)
    iterations_run: int = 0
    wall_time: float = 0.0
    degenerate: bool = False

    @property
    def final_loss(self) -> float:
        return self.loss_history[-1] if self.loss_history else self.initial_loss

    @property
    def peak_norm(self) -> float:
        return max([self.initial_norm, *self.norm_history])


def initial_value(taus, init: Init, dtype) -> np.ndarray:
    if Init(init) is Init.ZERO:
        return np.zeros(np.shape(taus[0]), dtype)
    return task_mean(taus, dtype)


def optimize_components(comps, init_value, optimizer, lr, iterations, name="") -> tuple[np.ndarray, OptimReport]:
    """Run exactly ``iterations`` gradient steps from ``init_value``."""
    start = time.perf_counter()
    tm = np.array(init_value, dtype=comps.dtype)
    loss0 = wudi2_loss(tm, comps)
    report = OptimReport(name, loss0, frobenius_norm(tm), ranks=list(comps.ranks), excluded=list(comps.excluded))
    state = OptimizerState(Optimizer(optimizer), lr)
    for it in range(1, iterations + 1):
        grad = analytic_gradient(tm, comps)
        tm = optimizer_step(state, tm, grad, where=f"in layer {name!r} at iteration {it}").astype(comps.dtype)
        loss = wudi2_loss(tm, comps)
        report.loss_history.append(loss)
        report.norm_history.append(frobenius_norm(tm))
        report.iterations_run = it
        if not np.isfinite(loss) or (loss0 > 0 and loss > DIVERGENCE_FACTOR * loss0):
            report.wall_time = time.perf_counter() - start
            raise DivergenceError(
                f"layer {name!r} diverged at iteration {it}: loss {loss:.3e} vs initial {loss0:.3e}", report
            )
    report.final_grad_norm = frobenius_norm(analytic_gradient(tm, comps))
    report.wall_time = time.perf_counter() - start
    return tm, report


def optimize_layer(taus, variant, recipe: MergeRecipe, name: str = "") -> tuple[np.ndarray, OptimReport]:
    dt = compute_dtype(*taus)
    try:
        comps = build_components(
            taus, variant, recipe.rank_policy, centered=True if recipe.lora_centered else None
        )
    except DegenerateLayerError:
        zero = np.zeros(np.shape(taus[0]), dt)
        return zero, OptimReport(name, 0.0, 0.0, excluded=list(range(len(taus))), degenerate=True)
    init = initial_value(taus, recipe.init, dt)
    return optimize_components(comps, init, recipe.optimizer, recipe.learning_rate, recipe.iterations, name)


def wudi_merge(tv, recipe: MergeRecipe, threads: int = 1):
    """Optimize every LinearMatrix key; returns ``(merged_vector, reports)``.

    Other keys are summed as in task arithmetic.
    """
    variant = VARIANT_FOR_METHOD[recipe.method]
    merged = {}
    for key in tv.keys:
        if key not in tv.linear_keys():
            acc = np.zeros(tv.deltas[0][key].shape)
            for t in tv.taus(key):
                acc += t
            merged[key] = acc.astype(tv.deltas[0][key].dtype)

    def run(key):
        return optimize_layer(tv.taus(key), variant, recipe, name=key)

    keys = tv.linear_keys()
    if threads > 1 and len(keys) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, keys))
    else:
        results = [run(k) for k in keys]
    reports = {}
    for key, (tm, report) in zip(keys, results):
        merged[key] = tm
        reports[key] = report
    return dict(sorted(merged.items())), reports


def write_report_csv(report: OptimReport, path) -> None:
    """Rows ``iteration, loss, fro_norm``; iteration 0 is the initial point."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "fro_norm"])
        w.writerow([0, repr(report.initial_loss), repr(report.initial_norm)])
        for i, (loss, norm) in enumerate(zip(report.loss_history, report.norm_history), 1):
            w.writerow([i, repr(loss), repr(norm)])
