import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taskmerge.errors import ConfigError, OptimizationError, UnsoundRadiusError
from taskmerge.theory import (
    SynthTask,
    TheoryConfig,
    bound_check,
    fine_tune,
    lipschitz_estimate,
    max_grad_norm_on_sphere,
    merge_and_measure,
    psi_matrix,
    run_bound_grid,
    steps_sweep,
    synth_task,
    write_bound_csv,
    write_sweep_csv,
)


def test_synth_noise_free_interpolates():
    t = synth_task(0, 4, 10, noise=0.0)
    assert t.loss(t.theta_star) == pytest.approx(0.0, abs=1e-20)


def test_synth_deterministic():
    a, b = synth_task(5, 3, 6, noise=0.1), synth_task(5, 3, 6, noise=0.1)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.y, b.y)


def test_one_dimensional_minimizer():
    t = SynthTask(np.array([[1.0], [1.0]]), np.array([2.0, 2.0]))
    np.testing.assert_allclose(t.minimizer(), [2.0])


def test_synth_requires_s_ge_d():
    with pytest.raises(ConfigError):
        synth_task(0, 5, 3)


def test_fine_tune_trivial_cases():
    t = synth_task(1, 3, 8)
    theta0 = np.ones(3)
    theta, tau, _ = fine_tune(t, theta0, 0.01, 0)
    assert np.array_equal(theta, theta0) and not np.any(tau)
    assert not np.any(fine_tune(t, theta0, 0.0, 10)[1])


def test_fine_tune_strict_descent_below_inverse_curvature():
    t = synth_task(2, 4, 12, noise=0.5)
    eta = 0.9 / np.linalg.eigvalsh(t.X.T @ t.X).max()
    theta = np.zeros(4)
    prev = t.loss(theta)
    for T in range(1, 30):
        theta, _, _ = fine_tune(t, np.zeros(4), eta, T)
        assert t.loss(theta) < prev
        prev = t.loss(theta)


def test_fine_tune_divergence():
    t = synth_task(3, 4, 12)
    with pytest.raises(OptimizationError, match="step"):
        fine_tune(t, np.zeros(4), 10.0, 500)


def test_fine_tune_matches_hand_loop():
    t = synth_task(4, 3, 7)
    theta = np.zeros(3)
    G = 0.0
    for _ in range(5):
        g = t.X.T @ (t.X @ theta - t.y)
        G = max(G, np.linalg.norm(g))
        theta = theta - 0.01 * g
    out, tau, G_out = fine_tune(t, np.zeros(3), 0.01, 5)
    np.testing.assert_allclose(out, theta, rtol=1e-14)
    assert G_out == pytest.approx(G, rel=1e-14)


# -- Lipschitz ------------------------------------------------------------


HALF_SQUARE = SynthTask(np.array([[1.0]]), np.array([0.0]))


def test_lipschitz_half_square():
    assert lipschitz_estimate(HALF_SQUARE, [0.0], 2.0) == pytest.approx(2.0, rel=1e-12)


def test_lipschitz_doubles_with_radius():
    t = synth_task(6, 3, 9)
    c1 = lipschitz_estimate(t, t.minimizer(), 1.0)
    c2 = lipschitz_estimate(t, t.minimizer(), 2.0)
    assert c2 >= 2 * c1 * (1 - 1e-12)


def test_lipschitz_flat_minimum():
    t = synth_task(7, 3, 9, noise=0.0)
    assert lipschitz_estimate(t, t.theta_star, 1e-9) < 1e-6


@pytest.mark.parametrize("R, samples", [(0.0, 256), (-1.0, 256), (1.0, 50)])
def test_lipschitz_bad_arguments(R, samples):
    with pytest.raises(ConfigError):
        lipschitz_estimate(HALF_SQUARE, [0.0], R, samples)


def test_lipschitz_unsound_radius():
    with pytest.raises(UnsoundRadiusError):
        lipschitz_estimate(HALF_SQUARE, [0.0], 1.0, required_radius=1.5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_lipschitz_is_upper_bound_on_ball(seed):
    # Dense interior sampling never beats the estimate.
    t = synth_task(seed, 3, 8)
    theta0 = np.zeros(3)
    C = lipschitz_estimate(t, theta0, 1.5)
    rng = np.random.default_rng(seed)
    pts = rng.standard_normal((2000, 3))
    pts *= (1.5 * rng.random((2000, 1)) ** (1 / 3)) / np.linalg.norm(pts, axis=1, keepdims=True)
    assert max(np.linalg.norm(t.grad(p)) for p in pts) <= C * (1 + 1e-12)


def _angle_grid_max(H, c, R):
    phi = np.linspace(0, 2 * np.pi, 400_001)
    u = R * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    return np.linalg.norm(u @ H + c, axis=1).max()


@pytest.mark.parametrize("seed", range(8))
def test_sphere_max_matches_angle_grid(seed):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((2, 2))
    H = a @ a.T
    c = rng.standard_normal(2) * rng.choice([0.0, 1.0, 10.0])
    R = rng.uniform(0.1, 3.0)
    brute = _angle_grid_max(H, c, R)
    assert max_grad_norm_on_sphere(H, c, R) == pytest.approx(brute, rel=1e-8)


@pytest.mark.parametrize(
    "H, c, R",
    [
        (np.diag([4.0, 1.0]), np.array([0.0, 0.5]), 1.0),  # no pull on the top axis
        (np.diag([4.0, 1.0]), np.array([0.0, 50.0]), 0.1),  # hard case, slack < 0
        (np.diag([2.0, 2.0]), np.array([0.3, 0.0]), 1.0),  # repeated top eigenvalue
        (np.zeros((2, 2)), np.array([1.0, 2.0]), 1.0),  # flat gradient
    ],
)
def test_sphere_max_special_cases(H, c, R):
    assert max_grad_norm_on_sphere(H, c, R) == pytest.approx(_angle_grid_max(H, c, R), rel=1e-8)


def test_sphere_max_below_triangle_bound():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.standard_normal((4, 4))
        H, c, R = a @ a.T, rng.standard_normal(4), rng.uniform(0.1, 2)
        assert max_grad_norm_on_sphere(H, c, R) <= np.linalg.norm(c) + R * np.linalg.eigvalsh(H).max() + 1e-9


# -- gaps and bounds ------------------------------------------------------


def test_gap_single_task_zero():
    t = synth_task(8, 3, 9)
    tau = np.array([0.3, -0.1, 0.2])
    assert merge_and_measure([t], np.zeros(3), [tau], [1.0]).tolist() == [0.0]


def test_gap_zero_vectors():
    tasks = [synth_task(i, 3, 9) for i in range(2)]
    assert not np.any(merge_and_measure(tasks, np.zeros(3), [np.zeros(3)] * 2, [0.5, 0.5]))


def test_gap_direct_evaluation():
    tasks = [synth_task(i, 3, 9) for i in range(2)]
    theta0 = np.ones(3)
    taus = [np.array([0.1, 0.2, 0.3]), np.array([-0.2, 0.0, 0.1])]
    alphas = [0.6, 0.4]
    merged = theta0 + 0.6 * taus[0] + 0.4 * taus[1]

    def L(task, th):
        return 0.5 * sum((float(task.X[r] @ th) - task.y[r]) ** 2 for r in range(len(task.y)))

    expected = [abs(L(tk, merged) - L(tk, theta0 + tau)) for tk, tau in zip(tasks, taus)]
    np.testing.assert_allclose(merge_and_measure(tasks, theta0, taus, alphas), expected, rtol=1e-12)


def test_psi_two_tasks_unit_alphas():
    psi = psi_matrix([2.0, 3.0], [1.0, 1.0])
    np.testing.assert_array_equal(psi, [[0.0, 2.0], [3.0, 0.0]])
    r = bound_check([0.0, 0.0], [2.0, 3.0], 5.0, [1.0, 1.0], 0.1, 4, [1.0, 1.0])
    np.testing.assert_allclose(r.theorem_bound, [2.0 * 5 * 0.1 * 4, 3.0 * 5 * 0.1 * 4])


def test_bound_zero_eta_or_steps_passes():
    r = bound_check([0.0, 0.0], [1.0, 1.0], 0.0, [0.5, 0.5], 0.0, 0, [0.0, 0.0])
    assert r.passed and not np.any(r.theorem_bound)


def test_default_grid_all_pass():
    cells = run_bound_grid(TheoryConfig())
    assert len(cells) == 20
    for c in cells:
        assert c.report.passed and c.scaling_ok
        assert np.all(c.report.theorem_bound >= 0)
        assert c.radius >= c.tau_norms.max()


def test_explicit_grid():
    cfg = TheoryConfig(etas=[1e-3, 5e-3], steps=[0, 10], alphas=[0.2, 0.3, 0.5])
    cells = run_bound_grid(cfg)
    assert len(cells) == 4 and all(c.report.passed for c in cells)
    zero = [c for c in cells if c.report.T == 0]
    assert all(not np.any(c.report.gaps) for c in zero)


def test_grid_wrong_alpha_count():
    with pytest.raises(ConfigError):
        run_bound_grid(TheoryConfig(etas=[1e-3], steps=[5], alphas=[1.0]))


def test_grid_bit_reproducible(tmp_path):
    a, b = run_bound_grid(TheoryConfig(n_cells=5)), run_bound_grid(TheoryConfig(n_cells=5))
    write_bound_csv(a, tmp_path / "a.csv")
    write_bound_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert len(rows) == 15
    assert set(rows[0]) == {"cell", "task", "gap", "lemma_bound", "theorem_bound", "C", "G", "eta", "T", "pass"}


# -- steps sweep ----------------------------------------------------------


def test_sweep_base_row_and_determinism(tmp_path):
    cfg = TheoryConfig()
    rows = steps_sweep(cfg)
    assert rows == steps_sweep(cfg)
    base = [r for r in rows if r[0] == 0]
    assert len({r[2] for r in base}) == 1
    write_sweep_csv(rows, tmp_path / "s.csv")
    assert open(tmp_path / "s.csv").readline().strip() == "T,lambda,mean_loss"


def test_sweep_base_loss_equals_unmerged():
    cfg = TheoryConfig()
    rows = steps_sweep(cfg, steps=[0])
    from taskmerge.theory import make_tasks
    from taskmerge.tensor import child_rng

    rng = child_rng(cfg.seed, 4)
    theta0 = rng.standard_normal(cfg.d)
    shared = cfg.sweep_shared * rng.standard_normal(cfg.d)
    tasks = make_tasks(cfg, theta0, shared)
    assert rows[0][2] == float(np.mean([t.loss(theta0) for t in tasks]))


@pytest.mark.parametrize("lam_index", [0, 1])
def test_sweep_rise_then_decline(lam_index):
    rows = steps_sweep(TheoryConfig())
    lams = sorted({r[1] for r in rows})
    curve = [loss for _, lam, loss in rows if lam == lams[lam_index]]
    best = int(np.argmin(curve))
    assert 0 < best < len(curve) - 1


def test_sweep_rejects_unsorted():
    with pytest.raises(ConfigError):
        steps_sweep(TheoryConfig(), steps=[5, 1])
