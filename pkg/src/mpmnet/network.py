"""Feature extractors for MNIST and CIFAR-10 with softmax or MPM heads."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, NumericError, StateError
from .mpm import MpmHead, MpmSolution
from .tensor import Tensor

DROPOUT_P = 0.5
HEAD_KINDS = ("softmax-2", "mpm-1")
INPUT_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | dropout | affine | relu
    size: int = 0
    kernel: int = 0
    name: str = ""


@dataclass
class NetworkArch:
    dataset: str
    head: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    feature_dim: int
    input_mean: float = 0.0
    input_std: float = 1.0

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Walk the layers from the input shape; raises if they do not chain."""
        shapes: dict[str, tuple[int, ...]] = {}
        c, h, w = self.input_shape
        flat: Optional[int] = None
        for layer in self.layers:
            if layer.kind == "conv":
                if layer.kernel > h or layer.kernel > w:
                    raise DimensionError(f"{layer.name}: kernel larger than its {h}x{w} input")
                shapes[f"{layer.name}.w"] = (layer.size, c, layer.kernel, layer.kernel)
                shapes[f"{layer.name}.b"] = (layer.size,)
                c, h, w = layer.size, h - layer.kernel + 1, w - layer.kernel + 1
            elif layer.kind == "pool":
                h, w = -(-h // 2), -(-w // 2)
            elif layer.kind == "affine":
                fan_in = flat if flat is not None else c * h * w
                shapes[f"{layer.name}.w"] = (fan_in, layer.size)
                shapes[f"{layer.name}.b"] = (layer.size,)
                flat = layer.size
        if flat != (self.feature_dim if self.head == "mpm-1" else 2):
            raise DimensionError("layers do not end at the head's width")
        return shapes

    def param_count(self) -> int:
        n = sum(int(np.prod(s)) for s in self.param_shapes().values())
        return n + (self.feature_dim if self.head == "mpm-1" else 0)


def build_arch(dataset: str, head: str) -> NetworkArch:
    if head not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {head!r}; expected one of {HEAD_KINDS}")
    if dataset == "mnist":
        layers = [
            LayerSpec("conv", 10, 5, "conv1"), LayerSpec("relu"),
            LayerSpec("pool"),
            LayerSpec("conv", 20, 5, "conv2"), LayerSpec("relu"),
            LayerSpec("dropout"),
            LayerSpec("pool"),
            LayerSpec("affine", 50, name="fc1"), LayerSpec("relu"),
        ]
        feature_dim = 50
    elif dataset == "cifar10":
        layers = [
            LayerSpec("conv", 64, 3, "conv1"), LayerSpec("relu"),
            LayerSpec("conv", 64, 3, "conv2"), LayerSpec("relu"),
            LayerSpec("pool"),
            LayerSpec("conv", 128, 3, "conv3"), LayerSpec("relu"),
            LayerSpec("conv", 128, 3, "conv4"), LayerSpec("relu"),
            LayerSpec("pool"),
            LayerSpec("affine", 256, name="fc1"), LayerSpec("relu"),
        ]
        feature_dim = 256
    else:
        raise ConfigError(f"unknown dataset kind {dataset!r}")
    if head == "softmax-2":
        layers.append(LayerSpec("affine", 2, name="fc2"))
    return NetworkArch(dataset, head, INPUT_SHAPES[dataset], layers, feature_dim)


def init_params(arch: NetworkArch, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> dict[str, Tensor]:
    """Uniform weights with variance 2/fan_in, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.param_shapes().items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def _forward(arch: NetworkArch, params: dict[str, Tensor], x: Tensor, train: bool,
             rng, stop_at_features: bool) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[1:] != arch.input_shape:
        raise DimensionError(f"{arch.dataset} expects inputs of shape {arch.input_shape}, got {x.shape[1:]}")
    h = x
    if arch.input_mean != 0.0 or arch.input_std != 1.0:
        h = (h - arch.input_mean) * (1.0 / arch.input_std)
    for i, layer in enumerate(arch.layers):
        if layer.kind == "conv":
            h = T.conv2d(h, params[f"{layer.name}.w"], params[f"{layer.name}.b"])
        elif layer.kind == "relu":
            h = T.relu(h)
        elif layer.kind == "pool":
            h = T.maxpool2d(h)
        elif layer.kind == "dropout":
            h = T.dropout(h, DROPOUT_P, rng, train)
        elif layer.kind == "affine":
            if stop_at_features and layer.name == "fc2":
                break
            if h.ndim > 2:
                h = T.reshape(h, (h.shape[0], -1))
            h = T.affine(h, params[f"{layer.name}.w"], params[f"{layer.name}.b"])
        if not np.all(np.isfinite(h.data)):
            raise NumericError(f"non-finite activation after layer {i} ({layer.name or layer.kind})")
    return h


def feature_forward(arch: NetworkArch, params: dict[str, Tensor], batch, train: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Penultimate features g(x, w) of shape (n, feature_dim)."""
    return _forward(arch, params, batch, train, rng, stop_at_features=True)


def softmax_xent(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of two-class logits against class indices {0, 1}."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    logp = T.log_softmax(logits)
    picked = T.take(T.reshape(logp, (-1,)), np.arange(len(labels)) * logits.shape[1] + labels)
    return T.scale(T.tsum(picked), -1.0 / len(labels))


@dataclass
class Model:
    """Network parameters plus head state (MPM direction, multiplier, frozen solution)."""

    arch: NetworkArch
    params: dict[str, Tensor]
    head: Optional[MpmHead] = None
    solution: Optional[MpmSolution] = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, dataset: str, head: str, seed: int = 0, dtype=T.DEFAULT_DTYPE) -> "Model":
        arch = build_arch(dataset, head)
        return cls(arch, init_params(arch, seed, dtype))

    @property
    def head_kind(self) -> str:
        return self.arch.head

    def trainable(self) -> list[Tensor]:
        out = list(self.params.values())
        if self.head is not None:
            out.append(self.head.a)
        return out

    def features(self, x, train: bool = False, rng=None) -> Tensor:
        return feature_forward(self.arch, self.params, x, train, rng)

    def softmax_logits(self, x, train: bool = False, rng=None) -> Tensor:
        return _forward(self.arch, self.params, x, train, rng, stop_at_features=False)

    def decision_value(self, x) -> Tensor:
        """``a*^T g(x) - b*`` per example (MPM head only)."""
        if self.solution is None:
            raise StateError("mpm head has no frozen solution; call freeze_solution first")
        g = self.features(x)
        a = Tensor(self.solution.a_star.astype(g.dtype))
        return T.matmul(g, a) - self.solution.b_star

    def frozen(self) -> "Model":
        """View sharing the parameter arrays but recording no weight gradients."""
        params = {k: Tensor(v.data, name=k) for k, v in self.params.items()}
        return Model(self.arch, params, self.head, self.solution, self.meta)

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        head = None
        if self.head is not None:
            head = MpmHead(Tensor(self.head.a.data.astype(dtype), requires_grad=True), self.head.lam)
        return Model(self.arch, params, head, self.solution, dict(self.meta))


def predict(model: Model, batch, batch_size: int = 1000) -> np.ndarray:
    """Labels in {+1, -1}: +1 for the positive class (class x)."""
    if model.head_kind == "mpm-1" and model.solution is None:
        raise StateError("mpm head has no frozen solution")
    batch = np.asarray(batch.data if isinstance(batch, Tensor) else batch)
    out = []
    with T.no_grad():
        for i in range(0, len(batch), batch_size):
            xb = batch[i:i + batch_size]
            if model.head_kind == "softmax-2":
                z = model.softmax_logits(xb).data
                out.append(np.where(z[:, 0] >= z[:, 1], 1, -1))
            else:
                v = model.decision_value(xb).data
                out.append(np.where(v >= 0, 1, -1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of ``labels`` (+1/-1) reproduced by :func:`predict`."""
    return 100.0 * float(np.mean(predict(model, images) == np.asarray(labels)))
