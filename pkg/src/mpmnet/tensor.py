"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every operation in this module that
receives at least one tensor with ``requires_grad`` set returns a tensor
that remembers its inputs and a backward rule. Calling
:meth:`Tensor.backward` on a scalar result builds a :class:`Tape` (the
executed operations in topological order) and replays it in reverse,
accumulating ``.grad`` on every leaf that asked for one.

Only the handful of operations needed by the two convolutional feature
extractors, the softmax baseline and the minimax probability loss are
provided.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DimensionError,
    DomainError,
    EmptyBatchError,
    InsufficientSamplesError,
    NumericError,
)

DEFAULT_DTYPE = np.float64
# sqrt smoothing used inside quad_form_sqrt; keeps 1/(2 sqrt q) bounded near q = 0
SQRT_SMOOTHING = 1e-12
# covariance ridge added by batch_cov unless the caller overrides it
COV_REG = 1e-6

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording on the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls(data)
        if grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            out._op = op
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        Tape.record(self).backward(self, grad)


class Tape:
    """Ordered record of the operations that produced a tensor.

    ``nodes`` lists every non-leaf tensor reachable from the root in an
    order where each node comes after all of its inputs.
    """

    def __init__(self, nodes: list[Tensor], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t.is_leaf:
                if t.requires_grad:
                    leaves.append(t)
                continue
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(nodes, leaves)

    def backward(self, root: Tensor, grad: Optional[np.ndarray] = None) -> None:
        if not root.requires_grad:
            raise NumericError("backward() called on a tensor that does not require grad")
        if grad is None:
            if root.size != 1:
                raise DimensionError("backward() without an explicit grad needs a scalar output")
            grad = np.ones_like(root.data)
        grads: dict[int, np.ndarray] = {id(root): np.asarray(grad, dtype=root.dtype)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise DimensionError(
                        f"backward of {node._op} produced grad {pg.shape} for input {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
        for leaf in self.leaves:
            g = grads.get(id(leaf))
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def as_tensor(x: ArrayLike, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------

def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(out, (a, b), backward, "add")


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(out, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data * c, (x,), lambda g: (g * c,), "scale")


def neg(x: Tensor) -> Tensor:
    return scale(x, -1.0)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._from_op(np.where(mask, x.data, 0.0).astype(x.dtype), (x,),
                           lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt_smoothed(x: Tensor, sigma: float = SQRT_SMOOTHING) -> Tensor:
    """Elementwise ``sqrt(x + sigma)``."""
    x = as_tensor(x)
    shifted = x.data + sigma
    if np.any(shifted < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(shifted)

    def backward(g):
        with np.errstate(divide="ignore"):
            return (g / (2.0 * out),)

    return Tensor._from_op(out, (x,), backward, "sqrt")


def reciprocal(x: Tensor) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data == 0):
        raise DomainError("reciprocal of zero")
    inv = 1.0 / x.data
    return Tensor._from_op(inv, (x,), lambda g: (-g * inv * inv,), "reciprocal")


_ELEMENTWISE = {
    "relu": relu,
    "sigmoid": sigmoid,
    "log": log,
    "add": add,
    "mul": mul,
    "scale": scale,
    "neg": neg,
    "sqrt-smoothed": sqrt_smoothed,
}


def elementwise(kind: str, *args, **kwargs) -> Tensor:
    """Dispatch by name, e.g. ``elementwise("sqrt-smoothed", q, sigma=0.0)``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args, **kwargs)


# -- reductions and shape ---------------------------------------------------

def tsum(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis))

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(out, (x,), backward, "sum")


def tmean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def take(x: Tensor, index) -> Tensor:
    """Select entries along the first axis (fancy indexing, differentiable)."""
    x = as_tensor(x)
    index = np.asarray(index)
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(out, (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, backward, "concat")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    out = a.data @ b.data

    def backward(g):
        if a.ndim == 1 and b.ndim == 1:
            return g * b.data, g * a.data
        if a.ndim == 1:
            return b.data @ g, np.outer(a.data, g)
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return Tensor._from_op(out, (a, b), backward, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    return matmul(a, b)


def affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Row-wise ``x @ W + b`` for ``x`` of shape (batch, in)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"affine: x {x.shape} does not chain with W {W.shape}")
    if b.shape != (W.shape[1],):
        raise DimensionError(f"affine: bias {b.shape} does not match W {W.shape}")
    out = x.data @ W.data + b.data

    def backward(g):
        gx = g @ W.data.T if x.requires_grad else None
        gw = x.data.T @ g if W.requires_grad else None
        return gx, gw, g.sum(axis=0)

    return Tensor._from_op(out, (x, W, b), backward, "affine")


def conv2d(x: Tensor, k: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is (batch, cin, h, w), ``k`` is (cout, cin, kh, kw); the result is
    (batch, cout, h - kh + 1, w - kw + 1). An optional per-channel bias is
    added after the correlation.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and kernel")
    n, cin, h, w = x.shape
    cout, kcin, kh, kw = k.shape
    if kcin != cin:
        raise DimensionError(f"conv2d: kernel expects {kcin} channels, input has {cin}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    cols = sliding_window_view(x.data, (kh, kw), axis=(2, 3))  # n, cin, h', w', kh, kw
    out = np.tensordot(cols, k.data, axes=([1, 4, 5], [1, 2, 3]))  # n, h', w', cout
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(g):
        gk = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3])) if k.requires_grad else None
        if not x.requires_grad:
            return None, gk
        # col2im: per-window input gradients, then scatter-add each kernel offset
        gcols = np.tensordot(g, k.data, axes=([1], [0]))  # n, h', w', cin, kh, kw
        gcols = gcols.transpose(0, 3, 4, 5, 1, 2)  # n, cin, kh, kw, h', w'
        ho, wo = g.shape[2], g.shape[3]
        gx = np.zeros((n, cin, h, w), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + ho, j:j + wo] += gcols[:, :, i, j]
        return gx, gk

    result = Tensor._from_op(out, (x, k), backward, "conv2d")
    if bias is not None:
        result = add(result, reshape(bias, (1, cout, 1, 1)))
    return result


def maxpool2d(x: Tensor, window: int = 2) -> Tensor:
    """2x2 max pooling, stride 2, odd extents padded with -inf on the high side."""
    x = as_tensor(x)
    if window != 2:
        raise DimensionError("maxpool2d supports window=2 only")
    if x.ndim != 4:
        raise DimensionError("maxpool2d expects a 4-d input")
    n, c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    data = x.data
    if (h % 2) or (w % 2):
        data = np.pad(data, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)),
                      constant_values=-np.inf)
    blocks = data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    arg = blocks.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gfull = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return (np.ascontiguousarray(gfull[:, :, :h, :w]),)

    return Tensor._from_op(out, (x,), backward, "maxpool2d")


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; the identity when ``train`` is false."""
    if not train or p <= 0.0:
        return as_tensor(x)
    if rng is None:
        raise ValueError("dropout in train mode needs a random generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def log_softmax(z: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilised by the row maximum."""
    z = as_tensor(z)
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        # g_i - p_i sum_j g_j written as sum_j (g_i p_j - p_i g_j): the diagonal
        # cancels exactly, so a saturated row keeps its tiny but nonzero gradient
        # instead of rounding 1 - p_true to 0
        pair = g[:, :, None] * soft[:, None, :] - soft[:, :, None] * g[:, None, :]
        return (pair.sum(axis=2),)

    return Tensor._from_op(out, (z,), backward, "log_softmax")


# -- batch statistics -------------------------------------------------------

def batch_mean(f: Tensor) -> Tensor:
    f = as_tensor(f)
    if f.ndim != 2:
        raise DimensionError("batch_mean expects an (n, d) tensor")
    if f.shape[0] == 0:
        raise EmptyBatchError("batch_mean of an empty batch")
    return tmean(f, axis=0)


def batch_cov(f: Tensor, reg: float = COV_REG, unbiased: bool = False) -> Tensor:
    """Covariance of the rows of ``f`` plus ``reg`` on the diagonal.

    The default divisor is n (population covariance); ``unbiased`` switches
    it to n - 1.
    """
    f = as_tensor(f)
    if f.ndim != 2:
        raise DimensionError("batch_cov expects an (n, d) tensor")
    n, d = f.shape
    if n < 2:
        raise InsufficientSamplesError(f"batch_cov needs at least 2 rows, got {n}")
    if reg < 0:
        raise DomainError("covariance regulariser must be non-negative")
    denom = n - 1 if unbiased else n
    centered = f.data - f.data.mean(axis=0)
    out = centered.T @ centered / denom + reg * np.eye(d, dtype=f.dtype)

    def backward(g):
        return (centered @ (g + g.T) / denom,)

    return Tensor._from_op(out, (f,), backward, "batch_cov")


def quad_form_sqrt(a: Tensor, S: Tensor, sigma: float = SQRT_SMOOTHING) -> Tensor:
    """``sqrt(a^T S a + sigma)`` with gradients to both ``a`` and ``S``."""
    a, S = as_tensor(a), as_tensor(S)
    if a.ndim != 1 or S.shape != (a.shape[0], a.shape[0]):
        raise DimensionError(f"quad_form_sqrt: a {a.shape} vs S {S.shape}")
    q = float(a.data @ S.data @ a.data)
    if q < -1e-9:
        raise NumericError(f"quadratic form is negative ({q:.3e}); covariance not PSD")
    out = np.sqrt(max(q, 0.0) + sigma)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            dq = g / (2.0 * out)
        return dq * ((S.data + S.data.T) @ a.data), dq * np.outer(a.data, a.data)

    return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a, S), backward, "quad_form_sqrt")


def check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericError(f"non-finite values produced at {where}")
    return t
