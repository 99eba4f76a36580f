"""FGSM and Carlini-Wagner L2 attacks plus the self/transfer evaluation grid.

Labels are +1 / -1 throughout; the two-class logit index of a label is 0
for +1 and 1 for -1. Attacks talk to a model through a small duck-typed
surface (``logits``, ``predict``, ``fgsm_loss``); :func:`as_target` builds
it for a trained :class:`~mpmnet.network.Model`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, EvaluationError, NumericError, StateError
from .network import Model, predict, softmax_xent
from .tensor import Tensor

log = logging.getLogger(__name__)

FGSM_MODES = ("frozen-stats", "hyperplane")


def class_index(labels) -> np.ndarray:
    return np.where(np.asarray(labels) > 0, 0, 1)


@dataclass
class FgsmGrid:
    epsilons: np.ndarray

    def __post_init__(self):
        eps = np.asarray(self.epsilons, dtype=float)
        if eps.ndim != 1 or len(eps) == 0 or eps[0] != 0.0 or np.any(eps < 0) or np.any(np.diff(eps) <= 0):
            raise ConfigError("epsilon grid must start at 0 and increase strictly")
        self.epsilons = eps

    @classmethod
    def linspace(cls, stop: float, step: float) -> "FgsmGrid":
        n = int(round(stop / step))
        return cls(np.round(np.arange(n + 1) * step, 10))

    @classmethod
    def mnist(cls) -> "FgsmGrid":
        return cls.linspace(1.0, 0.025)

    @classmethod
    def cifar10(cls) -> "FgsmGrid":
        return cls.linspace(0.5, 0.02)


@dataclass
class CwConfig:
    binary_search_steps: int = 6
    c_initial: float = 1e-3
    max_iterations: int = 500
    step_size: float = 1e-2
    confidence: float = 0.0
    abort_early: bool = True
    batch_size: int = 200
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.binary_search_steps < 1 or self.max_iterations < 1:
            raise ConfigError("binary_search_steps and max_iterations must be positive")
        if self.c_initial <= 0 or self.step_size <= 0:
            raise ConfigError("c_initial and step_size must be positive")
        if self.confidence < 0:
            raise ConfigError("confidence must be non-negative")


# -- model adapters --------------------------------------------------------

def mpm_logits(v: Tensor) -> Tensor:
    """Two-class logits ``(v, 0)``; their softmax is ``(S(v), 1 - S(v))``."""
    v = T.as_tensor(v)
    col = T.reshape(v, (-1, 1))
    return T.concat([col, Tensor(np.zeros(col.shape, dtype=col.dtype))], axis=1)


class ModelTarget:
    """Attack surface of a trained model; weights are treated as constants."""

    def __init__(self, model: Model, fgsm_mode: str = "frozen-stats"):
        if fgsm_mode not in FGSM_MODES:
            raise ConfigError(f"fgsm mode must be one of {FGSM_MODES}")
        if model.head_kind == "mpm-1" and model.solution is None:
            raise StateError("mpm head has no frozen solution")
        self.model = model.frozen()
        self.fgsm_mode = fgsm_mode

    @property
    def dtype(self):
        return next(iter(self.model.params.values())).dtype

    def logits(self, x: Tensor) -> Tensor:
        if self.model.head_kind == "softmax-2":
            return self.model.softmax_logits(x)
        return mpm_logits(self.model.decision_value(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self.model, x)

    def fgsm_loss(self, x: Tensor, labels: np.ndarray) -> Tensor:
        if self.model.head_kind == "softmax-2":
            return softmax_xent(self.model.softmax_logits(x), class_index(labels))
        return mpm_example_loss(self.model, x, labels, self.fgsm_mode)


def as_target(model, fgsm_mode: str = "frozen-stats"):
    if isinstance(model, Model):
        return ModelTarget(model, fgsm_mode)
    return model


def mpm_example_loss(model: Model, x: Tensor, labels, mode: str = "frozen-stats") -> Tensor:
    """Per-example surrogate of the MPM training loss, summed over the batch.

    ``frozen-stats``: covariances and the opposite class mean come from the
    training set; the attacked example stands in for its own class mean.
    ``hyperplane``: the signed margin ``-y (a*^T g(x) - b*)``.
    """
    labels = np.asarray(labels)
    sign = np.where(labels > 0, 1.0, -1.0)
    sol = model.solution
    g = model.features(x)
    v = T.matmul(g, Tensor(sol.a_star.astype(g.dtype)))
    if mode == "hyperplane":
        return T.tsum(T.mul(v - sol.b_star, Tensor(-sign.astype(g.dtype))))
    stats = model.meta.get("frozen_stats")
    if stats is None or model.head is None:
        raise StateError("frozen-stats FGSM needs the training statistics and multiplier")
    a = sol.a_star
    sx = float(np.sqrt(max(a @ stats.cov_x.data @ a, 0.0)))
    sy = float(np.sqrt(max(a @ stats.cov_y.data @ a, 0.0)))
    ax, ay = float(a @ stats.mean_x.data), float(a @ stats.mean_y.data)
    # positive example: a^T g(x) - a^T my ; negative example: a^T mx - a^T g(x)
    other = np.where(labels > 0, -ay, ax)
    gap = T.mul(v, Tensor(sign.astype(g.dtype))) + Tensor(other.astype(g.dtype))
    per_example = (gap - 1.0) * float(model.head.lam) + (sx + sy)
    return T.tsum(per_example)


# -- FGSM ------------------------------------------------------------------

def fgsm_direction(model, x: np.ndarray, labels) -> np.ndarray:
    """``sign(grad_x J)``; exact zeros stay zero."""
    target = as_target(model)
    xt = Tensor(np.asarray(x, dtype=target.dtype), requires_grad=True)
    loss = target.fgsm_loss(xt, labels)
    loss.backward()
    if xt.grad is None:
        return np.zeros_like(xt.data)
    if not np.all(np.isfinite(xt.grad)):
        raise NumericError("non-finite input gradient in FGSM")
    return np.sign(xt.grad)


def fgsm(model, x: np.ndarray, labels, eps: float, box=(0.0, 1.0),
         direction: Optional[np.ndarray] = None) -> np.ndarray:
    if eps < 0:
        raise ConfigError("epsilon must be non-negative")
    if direction is None:
        direction = fgsm_direction(model, x, labels)
    return np.clip(np.asarray(x) + eps * direction, box[0], box[1])


# -- Carlini-Wagner L2 ---------------------------------------------------

def cw_objective_f(Z, true_class) -> np.ndarray:
    """``Z_l - max_{i != l} Z_i`` for two-class logits (one row per example)."""
    Z = np.atleast_2d(np.asarray(Z.data if isinstance(Z, Tensor) else Z, dtype=float))
    l = np.atleast_1d(np.asarray(true_class))
    rows = np.arange(len(Z))
    return Z[rows, l] - Z[rows, 1 - l]


@dataclass
class CwResult:
    x_adv: np.ndarray
    l2: np.ndarray
    success: np.ndarray
    c_final: np.ndarray


def _cw_loss(target, u: np.ndarray, x0: np.ndarray, cls: np.ndarray, c: np.ndarray,
             kappa: float, box: tuple[float, float]):
    """Per-example objective, its gradient w.r.t. ``u``, the candidate and its logits."""
    lo, hi = box
    th = np.tanh(u)
    xa = lo + (hi - lo) * (th + 1.0) / 2.0
    xt = Tensor(xa, requires_grad=True)
    Z = target.logits(xt)
    rows = np.arange(len(cls))
    flat = T.reshape(Z, (-1,))
    f = T.take(flat, rows * 2 + cls) - T.take(flat, rows * 2 + (1 - cls))
    # max(f, -kappa) through a fixed mask (subgradient 0 where clamped)
    active = (f.data > -kappa).astype(xa.dtype)
    hinge = T.mul(f, Tensor(active)) + Tensor((1.0 - active) * -kappa)
    diff = xt - Tensor(x0)
    l2sq = T.tsum(T.reshape(T.mul(diff, diff), (len(cls), -1)), axis=1)
    per = l2sq + T.mul(hinge, Tensor(c.astype(xa.dtype)))
    T.tsum(per).backward()
    gx = xt.grad
    if not np.all(np.isfinite(per.data)) or not np.all(np.isfinite(gx)):
        raise NumericError("non-finite C&W objective")
    gu = gx * (hi - lo) * (1.0 - th * th) / 2.0
    return per.data, gu, xa, Z.data, f.data


def cw_l2(model, x: np.ndarray, labels, cfg: CwConfig = CwConfig()) -> CwResult:
    """Untargeted C&W-L2 over a batch, optimising in tanh space with Adam.

    ``c`` is searched per example: after each round a success lowers the
    upper bound, a failure raises the lower bound (times 10 while no upper
    bound is known). Returns the closest successful candidate, or the last
    iterate where every round failed.
    """
    target = as_target(model)
    dtype = getattr(target, "dtype", np.float64)
    x = np.asarray(x, dtype=dtype)
    labels = np.asarray(labels)
    out_x = x.copy()
    out_l2 = np.zeros(len(x))
    out_ok = np.zeros(len(x), dtype=bool)
    out_c = np.zeros(len(x))
    for start in range(0, len(x), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        r = _cw_batch(target, x[sl], labels[sl], cfg)
        out_x[sl], out_l2[sl], out_ok[sl], out_c[sl] = r.x_adv, r.l2, r.success, r.c_final
    return CwResult(out_x, out_l2, out_ok, out_c)


def _cw_batch(target, x: np.ndarray, labels: np.ndarray, cfg: CwConfig) -> CwResult:
    n = len(x)
    lo_box, hi_box = cfg.box
    kappa = cfg.confidence
    cls = class_index(labels)
    scaled = (x - lo_box) / (hi_box - lo_box)
    u0 = np.arctanh(np.clip(2.0 * scaled - 1.0, -1.0, 1.0) * (1 - 1e-6))
    lower = np.zeros(n)
    upper = np.full(n, 1e10)
    c = np.full(n, cfg.c_initial)
    best_l2 = np.full(n, np.inf)
    best_x = x.copy()
    last_x = x.copy()
    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    check_every = max(cfg.max_iterations // 10, 1)
    for rnd in range(cfg.binary_search_steps):
        u = u0.copy()
        m = np.zeros_like(u)
        v = np.zeros_like(u)
        round_ok = np.zeros(n, dtype=bool)
        prev = np.inf
        for it in range(cfg.max_iterations):
            per, gu, xa, Z, f = _cw_loss(target, u, x, cls, c, kappa, cfg.box)
            pred_cls = np.where(Z[:, 0] >= Z[:, 1], 0, 1)
            ok = (pred_cls != cls) & (f <= -kappa)
            l2 = np.sqrt(((xa - x).reshape(n, -1) ** 2).sum(axis=1))
            improved = ok & (l2 < best_l2)
            best_l2[improved] = l2[improved]
            best_x[improved] = xa[improved]
            round_ok |= ok
            last_x = xa
            if cfg.abort_early and it % check_every == 0:
                total = float(per.sum())
                if total > prev * 0.9999:
                    break
                prev = total
            t = it + 1
            m = beta1 * m + (1 - beta1) * gu
            v = beta2 * v + (1 - beta2) * gu * gu
            u = u - cfg.step_size * (m / (1 - beta1 ** t)) / (np.sqrt(v / (1 - beta2 ** t)) + eps_adam)
        upper = np.where(round_ok, np.minimum(upper, c), upper)
        lower = np.where(round_ok, lower, np.maximum(lower, c))
        c = np.where(upper < 1e9, (lower + upper) / 2.0, c * 10.0)
        log.debug("cw round %d: %d/%d successful", rnd, int(round_ok.sum()), n)
    success = np.isfinite(best_l2)
    pick = success.reshape((n,) + (1,) * (x.ndim - 1))
    x_adv = np.clip(np.where(pick, best_x, last_x), lo_box, hi_box).astype(x.dtype)
    if success.any():
        # confirm with the model's own decision rule
        success &= target.predict(x_adv) != labels
    l2 = np.sqrt(((x_adv - x).reshape(n, -1) ** 2).sum(axis=1))
    return CwResult(x_adv, l2, success, c)


# -- evaluation ------------------------------------------------------------

@dataclass
class AccuracyRow:
    source: str
    target: str
    param: float
    accuracy: float


@dataclass
class ExampleRecord:
    index: int
    source: str
    target: str
    param: float
    success: bool
    l2: float
    linf: float


@dataclass
class AttackReport:
    attack: str
    names: tuple[str, str]
    indices: np.ndarray
    rows: list[AccuracyRow] = field(default_factory=list)
    examples: list[ExampleRecord] = field(default_factory=list)

    @property
    def n_jointly_correct(self) -> int:
        return len(self.indices)

    def curve(self, source: str, target: str) -> tuple[np.ndarray, np.ndarray]:
        pts = [(r.param, r.accuracy) for r in self.rows if r.source == source and r.target == target]
        p, a = zip(*pts) if pts else ((), ())
        return np.asarray(p), np.asarray(a)

    def accuracy(self, source: str, target: str, param: Optional[float] = None) -> float:
        for r in self.rows:
            if r.source == source and r.target == target and (param is None or np.isclose(r.param, param)):
                return r.accuracy
        raise KeyError((source, target, param))

    def self_records(self, name: str, param: Optional[float] = None) -> list[ExampleRecord]:
        return [e for e in self.examples
                if e.source == name and e.target == name and (param is None or np.isclose(e.param, param))]


def jointly_correct(model_a, model_b, images, labels) -> np.ndarray:
    ta, tb = as_target(model_a), as_target(model_b)
    ok = (ta.predict(images) == labels) & (tb.predict(images) == labels)
    return np.flatnonzero(ok)


def eval_attack_grid(model_a, model_b, images: np.ndarray, labels: np.ndarray, attack: str,
                     grid_or_cfg=None, names: Sequence[str] = ("cnn", "mpm"),
                     max_examples: Optional[int] = None,
                     fgsm_mode: str = "frozen-stats") -> AttackReport:
    """Attack both models on their jointly-correct examples; score all four pairs."""
    labels = np.asarray(labels)
    idx = jointly_correct(model_a, model_b, images, labels)
    if max_examples is not None:
        idx = idx[:max_examples]
    if len(idx) == 0:
        raise EvaluationError("no test example is classified correctly by both models")
    x, y = np.asarray(images)[idx], labels[idx]
    targets = {names[0]: as_target(model_a, fgsm_mode), names[1]: as_target(model_b, fgsm_mode)}
    report = AttackReport(attack, tuple(names), idx)
    flat = lambda a: a.reshape(len(a), -1)
    if attack == "fgsm":
        grid = grid_or_cfg if isinstance(grid_or_cfg, FgsmGrid) else FgsmGrid(
            np.asarray(grid_or_cfg) if grid_or_cfg is not None else FgsmGrid.mnist().epsilons)
        for src_name, src in targets.items():
            direction = fgsm_direction(src, x, y)
            for eps in grid.epsilons:
                xa = fgsm(src, x, y, float(eps), direction=direction)
                d = flat(xa) - flat(x)
                l2, linf = np.sqrt((d ** 2).sum(axis=1)), np.abs(d).max(axis=1)
                for tgt_name, tgt in targets.items():
                    hit = tgt.predict(xa) == y
                    report.rows.append(AccuracyRow(src_name, tgt_name, float(eps), 100.0 * hit.mean()))
                    report.examples.extend(
                        ExampleRecord(int(i), src_name, tgt_name, float(eps), bool(not h), float(a), float(b))
                        for i, h, a, b in zip(idx, hit, l2, linf))
    elif attack == "cw":
        cfg = grid_or_cfg if isinstance(grid_or_cfg, CwConfig) else CwConfig()
        for src_name, src in targets.items():
            res = cw_l2(src, x, y, cfg)
            d = flat(res.x_adv) - flat(x)
            linf = np.abs(d).max(axis=1)
            for tgt_name, tgt in targets.items():
                hit = tgt.predict(res.x_adv) == y
                report.rows.append(AccuracyRow(src_name, tgt_name, cfg.c_initial, 100.0 * hit.mean()))
                report.examples.extend(
                    ExampleRecord(int(i), src_name, tgt_name, cfg.c_initial, bool(not h), float(a), float(b))
                    for i, h, a, b in zip(idx, hit, res.l2, linf))
    else:
        raise ConfigError(f"unknown attack kind {attack!r}")
    return report


@dataclass
class GapSummary:
    indices: np.ndarray
    differences: np.ndarray
    mean: float
    median: float


def perturbation_gap(records_mpm: Sequence[ExampleRecord],
                     records_cnn: Sequence[ExampleRecord]) -> GapSummary:
    """Per-example ``L2(first) - L2(second)`` over examples both attacks broke."""
    a = {r.index: r for r in records_mpm}
    b = {r.index: r for r in records_cnn}
    if set(a) != set(b):
        raise EvaluationError("the two reports cover different examples")
    both = sorted(i for i in a if a[i].success and b[i].success)
    diffs = np.array([a[i].l2 - b[i].l2 for i in both])
    if len(diffs) == 0:
        return GapSummary(np.array(both, dtype=int), diffs, float("nan"), float("nan"))
    return GapSummary(np.array(both), diffs, float(diffs.mean()), float(np.median(diffs)))
