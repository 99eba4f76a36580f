"""MPM statistics, loss, closed forms and the classical solver against oracles."""
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mpmnet import tensor as T
from mpmnet.errors import InfeasibleError, InsufficientSamplesError
from mpmnet.mpm import (ClassStats, MpmHead, alpha_star, class_stats, classical_objective,
                        freeze_from_stats, mpm_loss, predict_labels, solve_b_star,
                        solve_classical_mpm, stats_from_arrays)
from mpmnet.tensor import Tensor
from mpmnet.training import NesterovSGD, TrainConfig, train_step


def random_spd(rng, d, floor=0.1):
    A = rng.standard_normal((d, d))
    return A @ A.T / d + floor * np.eye(d)


def exact_cloud(rng, n, mean, cov=None):
    """Samples whose biased mean and covariance equal ``mean`` and ``cov`` exactly."""
    d = len(mean)
    z = rng.standard_normal((n, d))
    z -= z.mean(axis=0)
    z = z @ np.linalg.inv(np.linalg.cholesky(np.cov(z.T, bias=True))).T
    if cov is not None:
        z = z @ np.linalg.cholesky(cov).T
    return z + np.asarray(mean, float)


def grid_oracle(mx, my, Sx, Sy):
    """Brute-force min over the 2-d constraint line, coarse grid then a fine one."""
    delta = mx - my
    a0 = delta / (delta @ delta)
    n = np.array([-delta[1], delta[0]]) / np.linalg.norm(delta)

    def f(ts):
        A = a0[None, :] + ts[:, None] * n[None, :]
        return (np.sqrt(np.einsum("ij,jk,ik->i", A, Sx, A))
                + np.sqrt(np.einsum("ij,jk,ik->i", A, Sy, A)))

    span = 50 * np.linalg.norm(a0)
    ts = np.linspace(-span, span, 200_001)
    t0 = ts[np.argmin(f(ts))]
    fine = np.linspace(t0 - 2 * span / 2e5, t0 + 2 * span / 2e5, 20_001)
    return float(f(fine).min())


# -- statistics -------------------------------------------------------------

def test_class_stats_match_numpy():
    rng = np.random.default_rng(0)
    f = rng.standard_normal((12, 3))
    y = np.array([1, -1] * 6)
    s = class_stats(Tensor(f), y, cov_reg=0.0)
    np.testing.assert_allclose(s.mean_x.data, f[y > 0].mean(0))
    np.testing.assert_allclose(s.cov_y.data, np.cov(f[y < 0].T, bias=True), atol=1e-12)
    assert (s.n_x, s.n_y) == (6, 6)


def test_class_stats_needs_two_per_class():
    f = np.zeros((4, 2))
    with pytest.raises(InsufficientSamplesError):
        class_stats(Tensor(f), np.array([1, -1, -1, -1]))


def test_mpm_loss_value():
    stats = ClassStats.from_arrays(np.array([1.0, 0]), np.array([-1.0, 0]), np.eye(2), 4 * np.eye(2))
    head = MpmHead(Tensor(np.array([0.5, 0.5])), lam=2.0)
    # sqrt(0.5) + sqrt(2) + 2 * (1 - 1)
    expected = np.sqrt(0.5) + np.sqrt(2.0)
    assert mpm_loss(stats, head, sigma=0.0).item() == pytest.approx(expected, rel=1e-12)
    head.a.data = np.array([1.0, 0.0])
    expected = 1.0 + 2.0 + 2.0 * (2.0 - 1.0)
    assert mpm_loss(stats, head, sigma=0.0).item() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_mpm_loss_gradient_end_to_end(seed):
    """Loss through features, batch statistics and the head, against central differences."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((10, 4))
    y = np.array([1, -1] * 5)
    W = rng.standard_normal((4, 3))
    a = rng.standard_normal(3)
    lam = float(rng.standard_normal())

    def loss(W_, a_):
        feats = T.matmul(Tensor(x), W_)
        return mpm_loss(class_stats(feats, y), MpmHead(a_, lam))

    Wt, at = Tensor(W, requires_grad=True), Tensor(a, requires_grad=True)
    loss(Wt, at).backward()
    h = 1e-5
    for arr, grad in ((W, Wt.grad), (a, at.grad)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            with T.no_grad():
                fp = loss(Tensor(W), Tensor(a)).item()
            arr[idx] = old - h
            with T.no_grad():
                fm = loss(Tensor(W), Tensor(a)).item()
            arr[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(grad, fd, rtol=1e-4, atol=1e-7)


# -- closed forms -------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_b_star_two_sided_forms_agree(seed):
    rng = np.random.default_rng(seed)
    d = 3
    mx, my = rng.standard_normal(d), rng.standard_normal(d)
    Sx, Sy = random_spd(rng, d), random_spd(rng, d)
    stats = ClassStats.from_arrays(mx, my, Sx, Sy)
    a = rng.standard_normal(d)
    a /= a @ (mx - my)
    sx, sy = np.sqrt(a @ Sx @ a), np.sqrt(a @ Sy @ a)
    kappa = 1.0 / (sx + sy)
    b = solve_b_star(stats, a)
    assert b == pytest.approx(a @ mx - kappa * sx, rel=1e-12, abs=1e-12)
    assert b == pytest.approx(a @ my + kappa * sy, rel=1e-12, abs=1e-12)
    assert alpha_star(stats, a) == pytest.approx(kappa ** 2 / (1 + kappa ** 2), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3))
def test_frozen_solution_is_scale_free(seed, c):
    rng = np.random.default_rng(seed)
    stats = ClassStats.from_arrays(rng.standard_normal(3) + 2, rng.standard_normal(3) - 2,
                                   random_spd(rng, 3), random_spd(rng, 3))
    a = stats.delta.copy()
    s1, s2 = freeze_from_stats(stats, a), freeze_from_stats(stats, c * a)
    assert s2.alpha_star == pytest.approx(s1.alpha_star, rel=1e-9)
    assert s2.b_star == pytest.approx(c * s1.b_star, rel=1e-9, abs=1e-12)
    assert 0.0 <= s1.alpha_star < 1.0


def test_alpha_zero_when_direction_reversed():
    stats = ClassStats.from_arrays(np.array([1.0, 0]), np.array([-1.0, 0]), np.eye(2), np.eye(2))
    assert alpha_star(stats, np.array([-0.5, 0.0])) == 0.0


# -- classical solver ------------------------------------------------------------

@pytest.mark.parametrize("seed", range(50))
def test_solver_equal_covariance_analytic(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 6))
    S = random_spd(rng, d)
    mx, my = rng.standard_normal(d), rng.standard_normal(d)
    delta = mx - my
    sol = solve_classical_mpm(mx, my, S, S)
    w = np.linalg.solve(S, delta)
    a_ref = w / (w @ delta)
    obj_ref = 2.0 / np.sqrt(delta @ w)
    np.testing.assert_allclose(sol.a_star, a_ref, rtol=1e-5, atol=1e-8 * np.abs(a_ref).max())
    assert classical_objective(sol.a_star, S, S) == pytest.approx(obj_ref, rel=1e-6)
    assert sol.a_star @ delta == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_solver_unequal_covariance_grid(seed):
    rng = np.random.default_rng(100 + seed)
    mx, my = rng.standard_normal(2), rng.standard_normal(2)
    Sx, Sy = random_spd(rng, 2), 3 * random_spd(rng, 2)
    sol = solve_classical_mpm(mx, my, Sx, Sy)
    obj = classical_objective(sol.a_star, Sx, Sy)
    ref = grid_oracle(mx, my, Sx, Sy)
    assert abs(obj - ref) < 1e-3
    assert obj <= ref + 1e-9  # the solver is never worse than the grid


@pytest.mark.parametrize("seed", range(20))
def test_alpha_matches_objective_at_solution(seed):
    rng = np.random.default_rng(200 + seed)
    d = int(rng.integers(2, 6))
    mx, my = rng.standard_normal(d), rng.standard_normal(d)
    Sx, Sy = random_spd(rng, d), random_spd(rng, d)
    sol = solve_classical_mpm(mx, my, Sx, Sy)
    obj = classical_objective(sol.a_star, Sx, Sy)
    assert sol.alpha_star == pytest.approx(1.0 / (obj ** 2 + 1.0), rel=1e-12)


def test_solver_rejects_equal_means():
    with pytest.raises(InfeasibleError):
        solve_classical_mpm(np.ones(2), np.ones(2), np.eye(2), np.eye(2))


def test_synthetic_two_gaussians_solution():
    sol = solve_classical_mpm(np.array([1.0, 0]), np.array([-1.0, 0]), np.eye(2), np.eye(2))
    np.testing.assert_allclose(sol.a_star, [0.5, 0.0], atol=1e-12)
    assert sol.b_star == pytest.approx(0.0, abs=1e-12)
    assert sol.alpha_star == pytest.approx(0.5, abs=1e-12)


def test_predict_labels_on_separable_data():
    rng = np.random.default_rng(5)
    X = np.vstack([exact_cloud(rng, 50, [3, 0]), exact_cloud(rng, 50, [-3, 0])])
    y = np.r_[np.ones(50), -np.ones(50)].astype(int)
    s = stats_from_arrays(X, y)
    sol = solve_classical_mpm(s.mean_x.data, s.mean_y.data, s.cov_x.data, s.cov_y.data)
    assert np.mean(predict_labels(sol, X) == y) > 0.99


# -- trained head on frozen identity features ------------------------------------------------

def _train_head(mode, steps=500):
    rng = np.random.default_rng(0)
    X = np.vstack([exact_cloud(rng, 500, [1, 0]), exact_cloud(rng, 500, [-1, 0])])
    y = np.r_[np.ones(500), -np.ones(500)].astype(int)
    # lr * aug_penalty * |mx - my|^2 must stay well below 2 for the penalty to be stable
    cfg = TrainConfig(lr=0.1, momentum=0.5, aug_penalty=1.0, constraint_mode=mode,
                      cov_reg=0.0, batch_size=1000)
    head = MpmHead(Tensor(np.array([0.3, 0.4]), requires_grad=True), 0.0)
    model = SimpleNamespace(head=head)
    opt = NesterovSGD([head.a], cfg.lr, cfg.momentum)
    for _ in range(steps):
        res = train_step(model, opt, X, y, cfg, features_fn=Tensor)
    return head, res, freeze_from_stats(stats_from_arrays(X, y), head.a.data)


@pytest.mark.parametrize("mode", ["lagrangian-dual", "hard-normalize"])
def test_head_converges_on_two_gaussians(mode):
    head, res, sol = _train_head(mode)
    np.testing.assert_allclose(head.a.data, [0.5, 0.0], atol=1e-2)
    assert sol.b_star == pytest.approx(0.0, abs=1e-2)
    assert sol.alpha_star == pytest.approx(0.5, abs=1e-2)
    assert abs(res.residual) < 1e-3


def test_dual_multiplier_reaches_kkt_value():
    # stationarity: 2 a / |a| + lam * (mx - my) = 0 at a = (0.5, 0) gives lam = -1
    head, res, _ = _train_head("lagrangian-dual")
    assert head.lam == pytest.approx(-1.0, abs=1e-3)
