"""Minimax probability machine: batch statistics, loss, decision rule, solver.

The hyperplane ``a^T z = b`` is scored by the worst-case misclassification
bound given only per-class means and covariances. Training minimises

    sqrt(a^T Sx a) + sqrt(a^T Sy a) + lam * (a^T (mx - my) - 1)

and inference uses the threshold ``b`` and worst-case accuracy ``alpha``
derived from the same quantities.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import DegenerateStatsError, InfeasibleError, InsufficientSamplesError, NumericError
from .tensor import Tensor


@dataclass
class ClassStats:
    mean_x: Tensor
    mean_y: Tensor
    cov_x: Tensor
    cov_y: Tensor
    n_x: int
    n_y: int

    @property
    def delta(self) -> np.ndarray:
        return self.mean_x.data - self.mean_y.data

    @classmethod
    def from_arrays(cls, mean_x, mean_y, cov_x, cov_y, n_x: int = 2, n_y: int = 2) -> "ClassStats":
        return cls(Tensor(mean_x), Tensor(mean_y), Tensor(cov_x), Tensor(cov_y), n_x, n_y)


@dataclass
class MpmHead:
    a: Tensor
    lam: float = 0.0

    @classmethod
    def from_stats(cls, stats: ClassStats, lam: float = 0.0) -> "MpmHead":
        """Start on the constraint, pointing along the class-mean difference."""
        delta = stats.delta
        nrm = float(delta @ delta)
        if nrm == 0.0:
            raise InfeasibleError("class means coincide; no feasible hyperplane direction")
        return cls(Tensor(delta / nrm, requires_grad=True), lam)

    def residual(self, stats: ClassStats) -> float:
        return float(self.a.data @ stats.delta) - 1.0


@dataclass(frozen=True)
class MpmSolution:
    a_star: np.ndarray
    b_star: float
    alpha_star: float

    def decision(self, features: np.ndarray) -> np.ndarray:
        return np.asarray(features) @ self.a_star - self.b_star


def class_stats(features: Tensor, labels, cov_reg: float = T.COV_REG,
                unbiased: bool = False) -> ClassStats:
    """Per-class mean and covariance of a feature batch (differentiable)."""
    features = T.as_tensor(features)
    labels = np.asarray(labels).reshape(-1)
    if len(labels) != features.shape[0]:
        raise InsufficientSamplesError("labels and features disagree in length")
    ix = np.flatnonzero(labels > 0)
    iy = np.flatnonzero(labels <= 0)
    if len(ix) < 2 or len(iy) < 2:
        raise InsufficientSamplesError(
            f"each class needs >= 2 samples in the batch (got {len(ix)} positive, {len(iy)} negative)")
    fx, fy = T.take(features, ix), T.take(features, iy)
    return ClassStats(
        T.batch_mean(fx), T.batch_mean(fy),
        T.batch_cov(fx, cov_reg, unbiased), T.batch_cov(fy, cov_reg, unbiased),
        len(ix), len(iy),
    )


def mpm_loss(stats: ClassStats, head: MpmHead, sigma: float = T.SQRT_SMOOTHING,
             lam=None) -> Tensor:
    lam = head.lam if lam is None else lam
    rx = T.quad_form_sqrt(head.a, stats.cov_x, sigma)
    ry = T.quad_form_sqrt(head.a, stats.cov_y, sigma)
    residual = T.dot(head.a, stats.mean_x - stats.mean_y) - 1.0
    loss = rx + ry + residual * float(lam)
    if not np.isfinite(loss.data):
        raise NumericError(
            f"mpm loss is not finite (sqrt_x={rx.item():.3g}, sqrt_y={ry.item():.3g}, "
            f"residual={residual.item():.3g}, lambda={lam:.3g})")
    return loss


def _radicals(stats: ClassStats, a: np.ndarray) -> tuple[float, float]:
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    qx = float(a @ stats.cov_x.data @ a)
    qy = float(a @ stats.cov_y.data @ a)
    return np.sqrt(max(qx, 0.0)), np.sqrt(max(qy, 0.0))


def solve_b_star(stats: ClassStats, a) -> float:
    """Decision threshold.

    Written in the scale-free form ``a^T mx - sx * a^T(mx - my) / (sx + sy)``,
    which is the usual closed form whenever ``a^T(mx - my) = 1`` and stays
    correct when the constraint only holds approximately (as for a head
    trained on mini-batches and frozen on the full training set).
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    sx, sy = _radicals(stats, a)
    if sx + sy == 0.0:
        raise DegenerateStatsError("both projected class variances are zero")
    gap = float(a @ stats.delta)
    return float(a @ stats.mean_x.data) - sx * gap / (sx + sy)


def alpha_star(stats: ClassStats, a) -> float:
    """Worst-case accuracy ``1 / ((sx + sy)^2 + 1)`` of the normalised direction.

    ``a`` is rescaled onto ``a^T(mx - my) = 1`` first; a direction that does
    not separate the means in the right order gets the trivial bound 0.
    """
    a = np.asarray(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    gap = float(a @ stats.delta)
    sx, sy = _radicals(stats, a)
    if gap <= 0.0:
        return 0.0
    s = (sx + sy) / gap
    return 1.0 / (s * s + 1.0)


def freeze_from_stats(stats: ClassStats, a) -> MpmSolution:
    a = np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    return MpmSolution(a, solve_b_star(stats, a), alpha_star(stats, a))


def _null_basis(delta: np.ndarray) -> np.ndarray:
    # columns span {u : delta^T u = 0}
    _, _, vt = np.linalg.svd(delta[None, :])
    return vt[1:].T


def solve_classical_mpm(mean_x, mean_y, cov_x, cov_y, tol: float = 1e-14,
                        max_iter: int = 200_000) -> MpmSolution:
    """Solve ``min sqrt(a'Sx a) + sqrt(a'Sy a)  s.t.  a'(mx - my) = 1``.

    The constraint is eliminated by writing ``a = a0 + N u`` with ``a0`` the
    minimum-norm feasible point and ``N`` an orthonormal basis of the null
    space of ``(mx - my)^T``; gradient descent with Barzilai-Borwein steps and
    Armijo backtracking runs on ``u`` until the relative objective change
    drops below ``tol``.
    """
    mx, my = np.asarray(mean_x, float), np.asarray(mean_y, float)
    Sx, Sy = np.asarray(cov_x, float), np.asarray(cov_y, float)
    delta = mx - my
    dd = float(delta @ delta)
    if dd == 0.0:
        raise InfeasibleError("class means are identical: a^T 0 = 1 has no solution")
    a0 = delta / dd
    N = _null_basis(delta)

    def objective(u):
        a = a0 + N @ u
        qx, qy = float(a @ Sx @ a), float(a @ Sy @ a)
        sx, sy = np.sqrt(max(qx, 0.0)), np.sqrt(max(qy, 0.0))
        return sx + sy, a, sx, sy

    def gradient(a, sx, sy):
        g = np.zeros_like(a)
        if sx > 0:
            g += Sx @ a / sx
        if sy > 0:
            g += Sy @ a / sy
        return N.T @ g

    u = np.zeros(N.shape[1])
    f, a, sx, sy = objective(u)
    if N.shape[1] > 0:
        g = gradient(a, sx, sy)
        step = 1.0
        u_prev = g_prev = None
        for _ in range(max_iter):
            if u_prev is not None:
                s, yv = u - u_prev, g - g_prev
                sy_ = float(s @ yv)
                step = float(s @ s) / sy_ if sy_ > 0 else 1.0
            gg = float(g @ g)
            if gg == 0.0:
                break
            while True:
                cand = u - step * g
                fc, ac, sxc, syc = objective(cand)
                if fc <= f - 1e-4 * step * gg or step < 1e-20:
                    break
                step *= 0.5
            if fc >= f:
                break  # no descent left at working precision
            u_prev, g_prev = u, g
            rel = abs(f - fc) / max(abs(f), 1e-300)
            u, f, a, sx, sy = cand, fc, ac, sxc, syc
            g = gradient(a, sx, sy)
            if rel < tol and np.linalg.norm(g) < 1e-9 * max(1.0, f):
                break
            if step < 1e-20:
                break
    # land exactly on the constraint
    a = a / float(a @ delta)
    stats = ClassStats.from_arrays(mx, my, Sx, Sy)
    return freeze_from_stats(stats, a)


def classical_objective(a, cov_x, cov_y) -> float:
    a = np.asarray(a, float)
    return float(np.sqrt(a @ np.asarray(cov_x) @ a) + np.sqrt(a @ np.asarray(cov_y) @ a))


def stats_from_arrays(features: np.ndarray, labels, cov_reg: float = 0.0,
                      unbiased: bool = False) -> ClassStats:
    """Non-differentiable :func:`class_stats` for plain arrays."""
    with T.no_grad():
        return class_stats(Tensor(features), labels, cov_reg, unbiased)


def predict_labels(solution: Optional[MpmSolution], features: np.ndarray) -> np.ndarray:
    """+1 where ``a*^T z - b* >= 0`` (class x), -1 otherwise."""
    return np.where(solution.decision(features) >= 0, 1, -1)
