"""Small reverse-mode autodiff over dense float64 arrays.

Every op returns a new :class:`Tensor`.  When at least one input requires a
gradient (and recording is not disabled with :func:`no_grad`) the result keeps
a reference to its inputs and a backward rule.  :func:`backward` orders that
graph topologically and replays it once per node.

Layout conventions: images are NHWC, conv kernels are ``K x K x Cin x Cout``.
Broadcasting is limited to scalar (size-1) operands; bias addition over the
trailing axis has its own op.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operands whose shapes do not conform to the op's rule."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf reached an op."""


class GradError(RuntimeError):
    pass


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("_data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # data may be updated in place by optimizers, never reshaped
    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self._data.shape:
            raise ShapeError(f"cannot assign shape {value.shape} to tensor of shape {self._data.shape}")
        self._data = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def ndim(self) -> int:
        return self._data.ndim

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def detach(self) -> Tensor:
        return Tensor(self._data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(*ts: Tensor) -> None:
    for t in ts:
        if not np.isfinite(t._data).all():
            raise NonFiniteError(f"non-finite value in input of shape {t.shape} (op {t.op})")


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out._data = data
    out.grad = None
    out.op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = parents if track else ()
    out._backward = backward if track else None
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.size == 1


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _pair_shapes(a: Tensor, b: Tensor, kind: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b):
        return a.shape
    if _is_scalar(a):
        return b.shape
    raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not match")


# ----------------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite(a, b)
    shape = _pair_shapes(a, b, "add")
    ad = a._data if a.shape == shape else a._data.reshape(())
    bd = b._data if b.shape == shape else b._data.reshape(())
    return _make(ad + bd, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite(a, b)
    shape = _pair_shapes(a, b, "mul")
    ad = a._data if a.shape == shape else a._data.reshape(())
    bd = b._data if b.shape == shape else b._data.reshape(())
    return _make(ad * bd, (a, b), lambda g: (_reduce_to(g * bd, a), _reduce_to(g * ad, b)), "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a._data, (a,), lambda g: (-g,), "neg")


def bias_add(x, b) -> Tensor:
    """``x + b`` where ``b`` has the shape of ``x``'s trailing axis."""
    x, b = _as_tensor(x), _as_tensor(b)
    _check_finite(x, b)
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise ShapeError(f"bias_add: bias shape {b.shape} does not match trailing axis of {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _make(x._data + b._data, (x, b), lambda g: (g, g.sum(axis=axes)), "bias_add")


def relu(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    mask = x._data > 0
    return _make(np.where(mask, x._data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    s = _sigmoid(x._data)
    return _make(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def abs_(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    sign = np.sign(x._data)
    return _make(np.abs(x._data), (x,), lambda g: (g * sign,), "abs")


def log(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    return _make(np.log(x._data), (x,), lambda g: (g / x._data,), "log")


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    z = x._data - x._data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (x,), back, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    z = x._data - x._data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _make(out, (x,), lambda g: (g - s * g.sum(axis=axis, keepdims=True),), "log_softmax")


# ----------------------------------------------------------------------- reductions

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum_(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    axes = _norm_axes(axis, x.ndim)
    out = x._data.sum(axis=axes)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape).copy(),)

    return _make(np.asarray(out), (x,), back, "sum")


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    _check_finite(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x._data.mean(axis=axes)

    def back(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / n,)

    return _make(np.asarray(out), (x,), back, "mean")


def max_(x, axis: int = -1) -> Tensor:
    """Maximum along one axis; the gradient goes to the first (lowest index) maximiser."""
    x = _as_tensor(x)
    _check_finite(x)
    axis = axis % x.ndim
    idx = np.expand_dims(x._data.argmax(axis=axis), axis)
    out = np.take_along_axis(x._data, idx, axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(x._data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), back, "max")


def min_(x, axis: int = -1) -> Tensor:
    return neg(max_(neg(x), axis=axis))


def row_normalize(x) -> Tensor:
    """Divide non-negative rows (last axis) by their sum; all-zero rows map to uniform."""
    x = _as_tensor(x)
    _check_finite(x)
    s = x._data.sum(axis=-1, keepdims=True)
    zero = s == 0
    safe = np.where(zero, 1.0, s)
    y = np.where(zero, 1.0 / x.shape[-1], x._data / safe)

    def back(g):
        gx = (g - (g * y).sum(axis=-1, keepdims=True)) / safe
        return (np.where(zero, 0.0, gx),)

    return _make(y, (x,), back, "row_normalize")


# ----------------------------------------------------------------------- structural

def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        out = x._data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    return _make(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def gather(x, indices, axis: int = -1) -> Tensor:
    """Select ``indices`` (1-D, repeats allowed) along ``axis``."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % x.ndim
    if idx.ndim != 1:
        raise ShapeError(f"gather: indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(f"gather: index out of range for axis {axis} of shape {x.shape}")
    out = np.take(x._data, idx, axis=axis)

    def back(g):
        gx = np.zeros_like(x._data)
        moved = np.moveaxis(gx, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _make(out, (x,), back, "gather")


def index(x, idx) -> Tensor:
    x = _as_tensor(x)
    out = x._data[idx]

    def back(g):
        gx = np.zeros_like(x._data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(np.array(out), (x,), back, "index")


def concat(ts: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    out = np.concatenate([t._data for t in ts], axis=axis)
    splits = np.cumsum(sizes)[:-1]
    return _make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


# ----------------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_finite(a, b)
    if a.ndim == 1 and b.ndim == 2 or a.ndim == 2 and b.ndim == 1:
        pass
    elif a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    ad, bd = a._data, b._data
    out = ad @ bd

    def back(g):
        ga = g @ bd.T if bd.ndim == 2 else np.outer(g, bd)
        if ad.ndim == 2:
            gb = ad.T @ g
        else:
            gb = np.outer(ad, g)
        return ga, gb

    return _make(out, (a, b), back, "matmul")


def _pad_amount(k: int, padding: str) -> int:
    if padding == "valid":
        return 0
    if padding == "same":
        if k % 2 == 0:
            raise ShapeError("same padding needs an odd kernel size")
        return k // 2
    raise ValueError(f"unknown padding {padding!r}")


def conv2d(x, w, stride: int = 1, padding: str = "valid") -> Tensor:
    """2-D cross-correlation of an NHWC batch with a ``K x K x Cin x Cout`` kernel."""
    x, w = _as_tensor(x), _as_tensor(w)
    _check_finite(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected NHWC input and KxKxCinxCout kernel, got {x.shape} and {w.shape}")
    n, h, wd, cin = x.shape
    k, k2, wcin, cout = w.shape
    if k != k2 or wcin != cin:
        raise ShapeError(f"conv2d: input {x.shape} does not fit kernel {w.shape}")
    p = _pad_amount(k, padding)
    xp = np.pad(x._data, ((0, 0), (p, p), (p, p), (0, 0))) if p else x._data
    hp, wp = h + 2 * p, wd + 2 * p
    if hp < k or wp < k:
        raise ShapeError(f"conv2d: input {x.shape} smaller than kernel {w.shape}")
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # (n, ho, wo, cin, k, k) -> rows of (k, k, cin)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, k * k * cin)
    wmat = w._data.reshape(k * k * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, cin)
        gxp = np.zeros((n, hp, wp, cin))
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
        gx = gxp[:, p:p + h, p:p + wd, :] if p else gxp
        return gx, gw

    return _make(out, (x, w), back, "conv2d")


def conv2d_flops(in_shape: Sequence[int], k: int, cout: int, stride: int = 1, padding: str = "valid") -> tuple[int, tuple[int, int, int]]:
    """Multiply-add count x2 of one conv2d on a single HxWxCin sample, and the output shape."""
    h, w, cin = in_shape
    p = _pad_amount(k, padding)
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    return 2 * ho * wo * k * k * cin * cout, (ho, wo, cout)


# ----------------------------------------------------------------------- quantization

def soft_quantize(x, centers, sigma: float) -> Tensor:
    """Softmax-weighted mix of ``centers``: sum_j c_j softmax_j(-sigma (x - c_j)^2).

    Differentiable in both ``x`` and ``centers``.
    """
    x, c = _as_tensor(x), _as_tensor(centers)
    _check_finite(x, c)
    if c.ndim != 1 or c.size == 0:
        raise ShapeError(f"soft_quantize: centers must be a non-empty 1-D tensor, got {c.shape}")
    d = x._data[..., None] - c._data
    z = -sigma * d * d
    z -= z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = (s * c._data).sum(axis=-1)

    def back(g):
        # dq/dz_j = s_j (c_j - q)
        dz = s * (c._data - out[..., None]) * g[..., None]
        gx = (dz * (-2.0 * sigma * d)).sum(axis=-1)
        lead = tuple(range(x.ndim))
        gc = (s * g[..., None]).sum(axis=lead) + (dz * (2.0 * sigma * d)).sum(axis=lead)
        return gx, gc

    return _make(out, (x, c), back, "soft_quantize")


# ----------------------------------------------------------------------- composite helpers

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (N x classes)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    return neg(mean(sum_(log_softmax(logits) * onehot, axis=1)))


# ----------------------------------------------------------------------- backward / optim

def _topo(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; intermediate gradients are not kept.
    """
    if loss.size != 1:
        raise GradError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradError("loss does not depend on any tensor that requires grad")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def sgd_step(params: Iterable[Tensor], lr: float, weight_decay: float = 0.0) -> None:
    """p <- p - lr * (grad + weight_decay * p); gradients are cleared afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise GradError(f"parameter of shape {p.shape} has no gradient")
    for p in params:
        p._data = p._data - lr * (p.grad + weight_decay * p._data)
        p.grad = None


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    """Scale gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping."""
    params = [p for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params)))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


_BINARY = {"add": add, "mul": mul, "matmul": matmul, "conv2d": conv2d, "gather": gather, "reshape": reshape}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "softmax": softmax, "mean": mean, "sum": sum_, "max": max_}


def tensor_op(a, b=None, kind: str = "add", **kw) -> Tensor:
    """Dispatch by op name; ``b`` is the second operand (or indices / shape)."""
    if kind in _BINARY:
        if b is None:
            raise ShapeError(f"{kind} needs a second operand")
        return _BINARY[kind](a, b, **kw)
    if kind in _UNARY:
        return _UNARY[kind](a, **kw)
    raise ValueError(f"unknown op kind {kind!r}")
