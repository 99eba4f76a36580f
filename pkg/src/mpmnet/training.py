"""End-to-end training for the softmax baseline and the MPM head."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import StratifiedBatcher
from .errors import ConfigError, NumericError
from .mpm import MpmHead, MpmSolution, class_stats, freeze_from_stats, mpm_loss, stats_from_arrays
from .network import Model, accuracy, softmax_xent
from .tensor import Tensor

log = logging.getLogger(__name__)

CONSTRAINT_MODES = ("lagrangian-dual", "fixed-penalty", "hard-normalize")


@dataclass
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    momentum: float = 0.5
    lr_decay_epochs: tuple[int, ...] = (50, 80)
    lr_decay_factor: float = 0.1
    batch_size: int = 128
    dual_lr: Optional[float] = None  # None -> same as lr
    seed: int = 0
    cov_reg: float = T.COV_REG
    cov_unbiased: bool = False
    sqrt_sigma: float = T.SQRT_SMOOTHING
    constraint_mode: str = "lagrangian-dual"
    # quadratic penalty on the constraint residual in lagrangian-dual mode
    aug_penalty: float = 10.0
    composition: str = "balanced"
    freeze_source: str = "train"  # train | last-batch
    lam_init: float = 0.0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 4:
            raise ConfigError("batch size must be at least 4 (2 per class)")
        if self.constraint_mode not in CONSTRAINT_MODES:
            raise ConfigError(f"constraint mode must be one of {CONSTRAINT_MODES}")
        if self.freeze_source not in ("train", "last-batch"):
            raise ConfigError("freeze_source must be 'train' or 'last-batch'")
        self.lr_decay_epochs = tuple(int(e) for e in self.lr_decay_epochs)

    @property
    def effective_dual_lr(self) -> float:
        return self.lr if self.dual_lr is None else self.dual_lr

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.lr_decay_epochs if epoch >= e)
        return self.lr * self.lr_decay_factor ** drops

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class NesterovSGD:
    """SGD with Nesterov momentum: ``v = mu v + g``; ``p -= lr (g + mu v)``."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        mu = self.momentum
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= mu
            v += p.grad
            p.data -= self.lr * (p.grad + mu * v)


def _check_grads(params: Sequence[Tensor], names: Sequence[str]) -> None:
    for p, n in zip(params, names):
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient for {n}")


def _param_names(model: Model) -> list[str]:
    names = list(model.params)
    if model.head is not None:
        names.append("head.a")
    return names


@dataclass
class StepResult:
    loss: float
    residual: float
    lam: float


def init_head(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig) -> MpmHead:
    with T.no_grad():
        f = model.features(images).data
    stats = stats_from_arrays(f, labels, cfg.cov_reg, cfg.cov_unbiased)
    head = MpmHead.from_stats(stats, cfg.lam_init)
    head.a.data = head.a.data.astype(f.dtype)
    return head


def train_step(model: Model, opt: NesterovSGD, images: np.ndarray, labels: np.ndarray,
               cfg: TrainConfig, rng: Optional[np.random.Generator] = None,
               features_fn: Optional[Callable] = None) -> StepResult:
    """One stochastic step on (w, a) followed by the multiplier update.

    ``features_fn`` replaces the network (used to train the head alone on
    fixed features).
    """
    head = model.head
    opt.zero_grad()
    if features_fn is None:
        feats = model.features(images, train=True, rng=rng)
    else:
        feats = features_fn(images)
    stats = class_stats(feats, labels, cfg.cov_reg, cfg.cov_unbiased)
    residual = T.dot(head.a, stats.mean_x - stats.mean_y) - 1.0
    if cfg.constraint_mode == "hard-normalize":
        # radicals of a / a^T(mx - my): scale-free, so w cannot shrink the features to zero
        gap = T.dot(head.a, stats.mean_x - stats.mean_y)
        if gap.item() <= 0.0:
            raise NumericError("a^T(mx - my) is not positive; cannot normalise the direction")
        normed = MpmHead(T.mul(head.a, T.reshape(T.reciprocal(gap), (1,))), 0.0)
        loss = mpm_loss(stats, normed, cfg.sqrt_sigma, lam=0.0)
        objective = loss
    else:
        loss = mpm_loss(stats, head, cfg.sqrt_sigma)
        objective = loss
        if cfg.constraint_mode == "lagrangian-dual" and cfg.aug_penalty > 0:
            objective = loss + T.mul(residual, residual) * (0.5 * cfg.aug_penalty)
    objective.backward()
    _check_grads(opt.params, _param_names(model) if features_fn is None else ["head.a"])
    r = residual.item()
    opt.step()
    if cfg.constraint_mode == "lagrangian-dual":
        head.lam += cfg.effective_dual_lr * r
    elif cfg.constraint_mode == "hard-normalize":
        gap = float(head.a.data @ stats.delta)
        if gap == 0.0 or not np.isfinite(gap):
            raise NumericError("cannot renormalise a: a^T(mx - my) is zero")
        head.a.data /= gap
    return StepResult(loss.item(), r, head.lam)


def feature_matrix(model: Model, images: np.ndarray, batch_size: int = 1000) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(model.features(images[i:i + batch_size]).data)
    return np.concatenate(out)


def freeze_solution(model: Model, images: np.ndarray, labels: np.ndarray,
                    cov_reg: float = T.COV_REG, unbiased: bool = False) -> MpmSolution:
    """Statistics of the given set's features (eval mode), then b* and alpha*."""
    feats = feature_matrix(model, images)
    stats = stats_from_arrays(feats, labels, cov_reg, unbiased)
    sol = freeze_from_stats(stats, model.head.a.data)
    model.solution = sol
    model.meta["frozen_stats"] = stats
    return sol


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    test_accuracy: Optional[float] = None
    residual: Optional[float] = None
    lam: Optional[float] = None


@dataclass
class TrainHistory:
    epochs: list[EpochLog] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def train_model(model: Model, images: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
                test: Optional[tuple[np.ndarray, np.ndarray]] = None,
                on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainHistory:
    """Train either head kind on a binary task (labels +1/-1)."""
    labels = np.asarray(labels)
    batcher = StratifiedBatcher(labels, cfg.batch_size, cfg.seed, cfg.composition)
    rng = np.random.default_rng([cfg.seed, 1])
    is_mpm = model.head_kind == "mpm-1"
    history = TrainHistory()
    last_batch = None
    opt = None
    for epoch in range(cfg.epochs):
        batches = batcher.epoch(epoch)
        if is_mpm and model.head is None:
            model.head = init_head(model, images[batches[0]], labels[batches[0]], cfg)
        if opt is None:
            opt = NesterovSGD(model.trainable(), cfg.lr, cfg.momentum)
        opt.lr = cfg.lr_at(epoch)
        losses = []
        res = None
        for idx in batches:
            xb, yb = images[idx], labels[idx]
            if is_mpm:
                res = train_step(model, opt, xb, yb, cfg, rng)
                losses.append(res.loss)
            else:
                losses.append(softmax_step(model, opt, xb, yb, rng))
            last_batch = idx
        history.step_losses.extend(losses)
        entry = EpochLog(epoch, opt.lr, float(np.mean(losses)))
        if is_mpm:
            entry.residual, entry.lam = res.residual, res.lam
            _freeze_for(model, images, labels, last_batch, cfg)
        if test is not None:
            entry.test_accuracy = accuracy(model, test[0], test[1])
        history.epochs.append(entry)
        log.info("epoch %d lr %.3g loss %.6g test_acc %s", epoch, entry.lr, entry.loss,
                 "n/a" if entry.test_accuracy is None else f"{entry.test_accuracy:.2f}")
        if on_epoch is not None:
            on_epoch(entry)
    if is_mpm:
        if model.head is None:
            batches = batcher.epoch(0)
            model.head = init_head(model, images[batches[0]], labels[batches[0]], cfg)
        _freeze_for(model, images, labels, last_batch, cfg)
    return history


def _freeze_for(model, images, labels, last_batch, cfg: TrainConfig) -> None:
    if cfg.freeze_source == "last-batch" and last_batch is not None:
        freeze_solution(model, images[last_batch], labels[last_batch], cfg.cov_reg, cfg.cov_unbiased)
    else:
        freeze_solution(model, images, labels, cfg.cov_reg, cfg.cov_unbiased)


def softmax_step(model: Model, opt: NesterovSGD, images, labels, rng=None) -> float:
    opt.zero_grad()
    logits = model.softmax_logits(images, train=True, rng=rng)
    cls = np.where(np.asarray(labels) > 0, 0, 1)
    loss = softmax_xent(logits, cls)
    if not np.isfinite(loss.data):
        raise NumericError("cross-entropy loss is not finite")
    loss.backward()
    _check_grads(opt.params, _param_names(model))
    opt.step()
    return loss.item()
