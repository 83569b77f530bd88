"""Synthetic check of the merging-error bound on least-squares tasks.

Each task has loss ``L_i(theta) = 0.5 * ||X_i theta - y_i||^2``.  Experts are
produced by ``T`` full-batch gradient steps of size ``eta`` from a shared
``theta_0``.  For a merge ``tau_m = sum_j alpha_j tau_j`` the per-task gap

    |L_i(theta_0 + tau_m) - L_i(theta_0 + tau_i)|

is compared with

    lemma bound    sum_j Psi_ij * ||tau_j||
    theorem bound  (sum_j Psi_ij) * G * eta * T

where ``Psi_ij = C_i |alpha_j|`` for ``j != i`` and ``C_i |1 - alpha_i|`` on
the diagonal.  Quadratic losses are only Lipschitz on bounded sets, so
``C_i`` is the largest gradient norm found on a ball around ``theta_0`` that
contains every evaluation point, and ``G`` is the largest gradient norm seen
along the fine-tuning trajectories.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import Checkpoint
from .errors import ConfigError, OptimizationError, UnsoundRadiusError
from .merging import apply_merged, task_arithmetic
from .task_vectors import compute_task_vectors
from .tensor import child_rng, seeded_rng

DIVERGENCE_NORM = 1e6


@dataclass
class SynthTask:
    X: np.ndarray
    y: np.ndarray
    theta_star: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def loss(self, theta) -> float:
        r = self.X @ theta - self.y
        return 0.5 * float(r @ r)

    def grad(self, theta) -> np.ndarray:
        return self.X.T @ (self.X @ theta - self.y)

    def minimizer(self) -> np.ndarray:
        return np.linalg.lstsq(self.X, self.y, rcond=None)[0]


def synth_task(seed, d, s, noise=0.0, theta0=None, spread=1.0, shared=None, max_tries=10) -> SynthTask:
    """Gaussian design with ground truth ``theta_0 + shared + spread * N(0, I)``."""
    if not s >= d >= 1:
        raise ConfigError(f"need s >= d >= 1, got d={d}, s={s}")
    rng = seeded_rng(seed)
    for _ in range(max_tries):
        X = rng.standard_normal((s, d))
        if np.linalg.matrix_rank(X) == d:
            break
    else:
        raise ConfigError(f"design matrix stayed rank-deficient after {max_tries} draws")
    theta0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    offset = np.zeros(d) if shared is None else np.asarray(shared, dtype=np.float64)
    theta_star = theta0 + offset + spread * rng.standard_normal(d)
    y = X @ theta_star + noise * rng.standard_normal(s)
    return SynthTask(X, y, theta_star)


def fine_tune(task: SynthTask, theta0, eta: float, T: int):
    """``T`` gradient steps; returns ``(theta, tau, G)`` with ``G`` the largest step-gradient norm."""
    theta = np.array(theta0, dtype=np.float64)
    G = 0.0
    for t in range(T):
        g = task.grad(theta)
        G = max(G, float(np.linalg.norm(g)))
        theta = theta - eta * g
        if not np.all(np.isfinite(theta)) or np.linalg.norm(theta) > DIVERGENCE_NORM:
            raise OptimizationError(f"fine-tuning diverged at step {t + 1} (eta={eta})")
    return theta, theta - np.asarray(theta0, dtype=np.float64), G


def lipschitz_estimate(task: SynthTask, theta0, R: float, samples: int = 256, seed: int = 0, required_radius=None) -> float:
    """Largest ``||grad L||`` over sampled points of the ball ``B(theta_0, R)``.

    The gradient norm of a convex quadratic peaks on the sphere, so samples
    are drawn there: random directions plus both ends of the design's
    principal axis.  ``theta_0`` itself is always included.  Sampling alone
    can miss the supremum, so the exact sphere maximum is folded in.
    """
    if not R > 0:
        raise ConfigError(f"radius must be positive, got {R}")
    if samples < 100:
        raise ConfigError(f"need at least 100 samples, got {samples}")
    if required_radius is not None and R < required_radius:
        raise UnsoundRadiusError(
            f"radius {R:.6g} is smaller than the {required_radius:.6g} needed to contain every evaluation point"
        )
    theta0 = np.asarray(theta0, dtype=np.float64)
    d = task.dim
    dirs = child_rng(seed, 0x11).standard_normal((samples, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    axis = np.linalg.svd(task.X, full_matrices=False)[2][0]
    dirs = np.vstack([dirs, axis, -axis])
    points = theta0 + R * dirs
    residual = points @ task.X.T - task.y
    grads = residual @ task.X
    norms = np.linalg.norm(grads, axis=1)
    sampled = max(norms.max(), np.linalg.norm(task.grad(theta0)))
    return float(max(sampled, max_grad_norm_on_sphere(task.X.T @ task.X, task.grad(theta0), R)))


def max_grad_norm_on_sphere(H, c, R: float) -> float:
    """``max ||H u + c||`` over ``||u|| = R`` for symmetric PSD ``H``.

    Stationary points satisfy ``u_k = h_k c_k / (mu - h_k^2)`` in the
    eigenbasis; the maximum takes the root ``mu > max h_k^2`` of
    ``sum (h_k c_k)^2 / (mu - h_k^2)^2 = R^2``, found by bisection.
    """
    h, Q = np.linalg.eigh(np.asarray(H, dtype=np.float64))
    h = np.maximum(h, 0.0)
    c = Q.T @ np.asarray(c, dtype=np.float64)
    top = h.max()
    if top == 0.0:
        return float(np.linalg.norm(c))
    hc = h * c
    is_top = np.isclose(h, top, rtol=1e-12, atol=0.0)
    top2 = top * top

    def u_of(mu):
        return hc / (mu - h * h)

    if np.linalg.norm(hc[is_top]) <= 1e-300:
        # hard case: no pull along the top eigenspace
        u = np.zeros_like(c)
        rest = ~is_top
        u[rest] = hc[rest] / (top2 - h[rest] ** 2)
        slack = R * R - u @ u
        if slack >= 0:
            u[np.argmax(is_top)] = np.sqrt(slack)
            return float(np.linalg.norm(h * u + c))
    lo, hi = top2, top2 + np.linalg.norm(hc) / R
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if np.linalg.norm(u_of(mid)) > R:
            lo = mid
        else:
            hi = mid
    u = u_of(hi)
    u *= R / np.linalg.norm(u)
    return float(np.linalg.norm(h * u + c))


def merge_and_measure(tasks, theta0, taus, alphas) -> np.ndarray:
    theta0 = np.asarray(theta0, dtype=np.float64)
    tau_m = np.zeros_like(theta0)
    for a, t in zip(alphas, taus):
        tau_m += a * t
    return np.array([abs(task.loss(theta0 + tau_m) - task.loss(theta0 + tau)) for task, tau in zip(tasks, taus)])


@dataclass
class BoundReport:
    gaps: np.ndarray
    lemma_bound: np.ndarray
    theorem_bound: np.ndarray
    psi: np.ndarray
    C: np.ndarray
    G: float
    eta: float
    T: int
    alphas: np.ndarray

    @property
    def lemma_pass(self) -> np.ndarray:
        return self.gaps <= self.lemma_bound

    @property
    def theorem_pass(self) -> np.ndarray:
        return self.gaps <= self.theorem_bound

    @property
    def passed(self) -> bool:
        return bool(np.all(self.lemma_pass) and np.all(self.theorem_pass))


def psi_matrix(C, alphas) -> np.ndarray:
    C = np.asarray(C, dtype=np.float64)
    alphas = np.asarray(alphas, dtype=np.float64)
    psi = C[:, None] * np.abs(alphas)[None, :]
    diag = np.arange(len(C))
    psi[diag, diag] = C * np.abs(1.0 - alphas[: len(C)])
    return psi


def bound_check(gaps, C, G, alphas, eta, T, tau_norms) -> BoundReport:
    psi = psi_matrix(C, alphas)
    lemma = psi @ np.asarray(tau_norms, dtype=np.float64)
    theorem = psi.sum(axis=1) * G * eta * T
    return BoundReport(
        np.asarray(gaps, dtype=np.float64), lemma, theorem, psi, np.asarray(C, dtype=np.float64),
        float(G), float(eta), int(T), np.asarray(alphas, dtype=np.float64),
    )


@dataclass
class TheoryConfig:
    d: int = 8
    s: int = 32
    n_tasks: int = 3
    noise: float = 0.1
    spread: float = 1.0
    n_cells: int = 20
    etas: list | None = None
    steps: list | None = None
    alphas: list | None = None
    eta_range: tuple = (1e-3, 1e-2)
    steps_range: tuple = (1, 100)
    samples: int = 256
    radius_margin: float = 0.0
    sweep_eta: float = 2e-3
    sweep_steps: tuple = (0, 2, 5, 10, 20, 50, 100, 200, 400, 800)
    sweep_shared: float = 2.0
    seed: int = 0


@dataclass
class BoundCell:
    index: int
    report: BoundReport
    tau_norms: np.ndarray
    radius: float
    scaling_ok: bool
    trajectory_G: np.ndarray = field(default_factory=lambda: np.zeros(0))


def make_tasks(cfg: TheoryConfig, theta0, shared=None):
    return [
        synth_task(child_rng(cfg.seed, 1, i).integers(2**63), cfg.d, cfg.s, cfg.noise, theta0, cfg.spread, shared)
        for i in range(cfg.n_tasks)
    ]


def grid_cells(cfg: TheoryConfig):
    """``(eta, T, alphas)`` per cell: the explicit product grid, or seeded random draws."""
    if cfg.etas is not None or cfg.steps is not None:
        etas = cfg.etas if cfg.etas is not None else [cfg.eta_range[0]]
        steps = cfg.steps if cfg.steps is not None else [cfg.steps_range[1]]
        alphas = cfg.alphas if cfg.alphas is not None else [1.0 / cfg.n_tasks] * cfg.n_tasks
        return [(float(e), int(t), np.asarray(alphas, dtype=np.float64)) for e in etas for t in steps]
    cells = []
    lo, hi = np.log(cfg.eta_range[0]), np.log(cfg.eta_range[1])
    for c in range(cfg.n_cells):
        rng = child_rng(cfg.seed, 2, c)
        eta = float(np.exp(rng.uniform(lo, hi)))
        T = int(rng.integers(cfg.steps_range[0], cfg.steps_range[1] + 1))
        alphas = np.asarray(cfg.alphas, dtype=np.float64) if cfg.alphas is not None else rng.uniform(0.0, 1.0, cfg.n_tasks)
        cells.append((eta, T, alphas))
    return cells


def run_bound_grid(cfg: TheoryConfig) -> list[BoundCell]:
    theta0 = seeded_rng(cfg.seed).standard_normal(cfg.d)
    tasks = make_tasks(cfg, theta0)
    out = []
    for index, (eta, T, alphas) in enumerate(grid_cells(cfg)):
        if len(alphas) != cfg.n_tasks:
            raise ConfigError(f"need {cfg.n_tasks} alphas, got {len(alphas)}")
        taus, Gs = [], []
        for task in tasks:
            _, tau, g = fine_tune(task, theta0, eta, T)
            taus.append(tau)
            Gs.append(g)
        G = max(Gs)
        tau_m = sum(a * t for a, t in zip(alphas, taus))
        norms = np.array([np.linalg.norm(t) for t in taus])
        required = float(norms.max() + np.linalg.norm(tau_m))
        radius = required * (1.0 + cfg.radius_margin) if required > 0 else 1e-12
        C = [lipschitz_estimate(task, theta0, radius, cfg.samples, child_rng(cfg.seed, 3, index).integers(2**63), required)
             for task in tasks]
        gaps = merge_and_measure(tasks, theta0, taus, alphas)
        report = bound_check(gaps, C, G, alphas, eta, T, norms)
        scaling_ok = bool(np.all(norms <= eta * T * G * (1 + 1e-12)))
        out.append(BoundCell(index, report, norms, radius, scaling_ok, np.array(Gs)))
    return out


def steps_sweep(cfg: TheoryConfig, eta=None, steps=None) -> list[tuple[int, float, float]]:
    """Mean post-merge task loss against fine-tuning length.

    Tasks share a common offset of size ``cfg.sweep_shared`` so that summing
    fully converged task vectors overshoots.  Rows are ``(T, lam, loss)``
    for ``lam`` in ``(1/n, 1)``.
    """
    eta = cfg.sweep_eta if eta is None else eta
    steps = list(cfg.sweep_steps if steps is None else steps)
    if steps != sorted(steps):
        raise ConfigError("sweep steps must be ascending")
    rng = child_rng(cfg.seed, 4)
    theta0 = rng.standard_normal(cfg.d)
    shared = cfg.sweep_shared * rng.standard_normal(cfg.d)
    tasks = make_tasks(cfg, theta0, shared)
    lams = (1.0 / cfg.n_tasks, 1.0)
    base = Checkpoint({"theta": theta0})
    rows = []
    for T in steps:
        experts = [Checkpoint({"theta": fine_tune(task, theta0, eta, T)[0]}) for task in tasks]
        tau_m = task_arithmetic(compute_task_vectors(base, experts))
        for lam in lams:
            theta = apply_merged(base, tau_m, lam)["theta"]
            rows.append((int(T), lam, float(np.mean([task.loss(theta) for task in tasks]))))
    return rows


def write_bound_csv(cells, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", "task", "gap", "lemma_bound", "theorem_bound", "C", "G", "eta", "T", "pass"])
        for cell in cells:
            r = cell.report
            for i in range(len(r.gaps)):
                ok = bool(r.lemma_pass[i] and r.theorem_pass[i])
                w.writerow([cell.index, i, repr(float(r.gaps[i])), repr(float(r.lemma_bound[i])),
                            repr(float(r.theorem_bound[i])), repr(float(r.C[i])), repr(r.G), repr(r.eta), r.T, int(ok)])


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["T", "lambda", "mean_loss"])
        for T, lam, loss in rows:
            w.writerow([T, repr(lam), repr(loss)])
