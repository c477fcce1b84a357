"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Graphs are built define-by-run: every primitive applied to a tensor that
requires gradients records a node holding its inputs and a closure that maps
the output gradient to input gradients. ``Tensor.backward`` walks the nodes in
reverse topological order and then frees the graph.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "GraphError",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "forward_primitive",
    "PRIMITIVES",
    "conv2d",
    "max_pool2d",
    "global_avg_pool",
    "concat",
    "squared_l2_distance",
    "take_rows",
    "log_softmax",
    "softmax",
    "softmax_with_temperature",
]


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""


class GraphError(RuntimeError):
    """Raised on misuse of the compute graph (non-scalar root, no graph, ...)."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(value) -> np.ndarray:
    return np.array(value, dtype=np.float64, copy=True) if not isinstance(value, np.ndarray) else value.astype(np.float64, copy=False)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Dense float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- graph ------------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() called on a tensor with no recorded graph")
        if self.is_leaf:
            self._accumulate(np.ones_like(self.data))
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node._accumulate(g)
                continue
            if node._backward is None:
                raise GraphError("graph already freed; run a new forward pass before backward()")
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node.requires_grad = False

    def _accumulate(self, g: np.ndarray) -> None:
        g = g.reshape(self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return _add(self, _wrap(other))

    def __radd__(self, other):
        return _add(_wrap(other), self)

    def __sub__(self, other):
        return _sub(self, _wrap(other))

    def __rsub__(self, other):
        return _sub(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return _scale(self, float(other))
        return _mul(self, _wrap(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return _scale(self, 1.0 / float(other))

    def __neg__(self):
        return _scale(self, -1.0)

    def __matmul__(self, other):
        return _matmul(self, _wrap(other))

    def relu(self):
        return _relu(self)

    def exp(self):
        return _exp(self)

    def log(self):
        return _log(self)

    def abs(self):
        return _abs(self)

    def sum(self, axis=None, keepdims: bool = False):
        return _sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return _mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _reshape(self, shape)


def _wrap(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _make(data: np.ndarray, parents: Iterable[Tensor], op: str, backward) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    return _make(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def _sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    return _make(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def _mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("mul", a, b)
    return _make(
        a.data * b.data, (a, b), "mul",
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def _scale(a: Tensor, factor: float) -> Tensor:
    return _make(a.data * factor, (a,), "scale", lambda g: (g * factor,))


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data, (a, b), "matmul",
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def _relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.maximum(a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


def _exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), "exp", lambda g: (g * out,))


def _log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _make(np.log(a.data), (a,), "log", lambda g: (g / a.data,))


def _abs(a: Tensor) -> Tensor:
    return _make(np.abs(a.data), (a,), "abs", lambda g: (g * np.sign(a.data),))


def _norm_axis(axis, ndim: int):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"sum: axis {ax} out of range for {ndim}-d input")
        out.append(ax % ndim)
    return tuple(sorted(out))


def _sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), "sum", backward)


def _mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ShapeError(f"mean: empty reduction over shape {a.shape}")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), "mean", backward)


def _reshape(a: Tensor, shape: tuple) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, "concat", backward)


def take_rows(a: Tensor, index) -> Tensor:
    """Rows ``a[index]`` along the first axis; repeated indices accumulate gradient."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.intp)
    if a.ndim == 0 or index.ndim != 1 or (index.size and (index.min() < -a.shape[0] or index.max() >= a.shape[0])):
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), "take_rows", backward)


def squared_l2_distance(a: Tensor, b: Tensor) -> Tensor:
    """Squared Euclidean distance along the last axis."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared-l2-distance: shapes differ {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.sum(diff * diff, axis=-1)

    def backward(g):
        ga = 2.0 * diff * np.expand_dims(g, -1)
        return ga, -ga

    return _make(out, (a, b), "squared_l2_distance", backward)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation; ``x`` is (N, C, H, W), ``weight`` is (O, C, kh, kw)."""
    x, weight = _wrap(x), _wrap(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: incompatible input {x.shape} and kernel {weight.shape}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} pad={pad}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: kernel {weight.shape[2:]} larger than padded input {(hp, wp)}")
    if bias is not None:
        bias = _wrap(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {o} output channels")
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = _pad(x.data, pad)
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
    wmat = weight.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * oh * ow, o)
        gw = (gmat.T @ cols).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, oh, ow, c, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, "conv2d", backward)


def max_pool2d(x: Tensor, window: int = 2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    x = _wrap(x)
    if x.ndim != 4 or window < 1 or x.shape[2] % window or x.shape[3] % window:
        raise ShapeError(f"max-pool2d: input {x.shape} not divisible by window {window}")
    n, c, h, w = x.shape
    oh, ow = h // window, w // window
    blocks = x.data.reshape(n, c, oh, window, ow, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, window * window)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, oh, ow, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _make(out, (x,), "max_pool2d", backward)


def global_avg_pool(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.ndim != 4:
        raise ShapeError(f"global-avg-pool: expected (N, C, H, W) input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),)

    return _make(out, (x,), "global_avg_pool", backward)


# ---------------------------------------------------------------------------
# composed functions
# ---------------------------------------------------------------------------


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable log-softmax (max subtraction, then log-sum-exp)."""
    logits = _wrap(logits)
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))
    z = logits - shift
    return z - z.exp().sum(axis=axis, keepdims=True).log()


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(logits, axis=axis).exp()


def softmax_with_temperature(logits: Tensor, tau: float, axis: int = -1) -> Tensor:
    """``softmax(logits / tau)``; ``tau`` must be positive."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return softmax(_wrap(logits) * (1.0 / float(tau)), axis=axis)


# ---------------------------------------------------------------------------
# dispatcher
# ---------------------------------------------------------------------------


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "add": lambda a, b: _add(a, b),
    "sub": lambda a, b: _sub(a, b),
    "mul": lambda a, b: _mul(a, b),
    "matmul": lambda a, b: _matmul(a, b),
    "conv2d": lambda x, w, b=None, stride=1, pad=0: conv2d(x, w, b, stride=stride, pad=pad),
    "relu": lambda a: _relu(a),
    "max_pool2d": lambda x, window=2: max_pool2d(x, window),
    "global_avg_pool": lambda x: global_avg_pool(x),
    "reshape": lambda a, shape: _reshape(a, tuple(shape)),
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "scale": lambda a, factor: _scale(a, float(factor)),
    "log": lambda a: _log(a),
    "exp": lambda a: _exp(a),
    "sum": lambda a, axis=None, keepdims=False: _sum(a, axis, keepdims),
    "mean": lambda a, axis=None, keepdims=False: _mean(a, axis, keepdims),
    "squared_l2_distance": lambda a, b: squared_l2_distance(a, b),
    "abs": lambda a: _abs(a),
    "take_rows": lambda a, index: take_rows(a, index),
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Apply the primitive named ``kind`` to ``inputs``.

    ``attrs`` carries per-kind settings such as ``stride``/``pad`` for conv2d,
    ``window`` for max_pool2d, ``axis`` for reductions and concat, ``shape``
    for reshape and ``factor`` for scale.
    """
    try:
        fn = PRIMITIVES[kind.replace("-", "_")]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    try:
        return fn(*[_wrap(t) for t in inputs], **attrs)
    except TypeError as exc:
        raise ShapeError(f"{kind}: bad arguments ({exc})") from None
