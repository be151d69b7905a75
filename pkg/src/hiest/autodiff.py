"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers its
inputs and a closure mapping the output gradient to input gradients.  Calling
:meth:`Tensor.backward` on a scalar walks that record once, in reverse
topological order, and accumulates ``grad`` on every leaf that requires it.

Elementwise binary ops require equal shapes; the only implicit broadcasting is
by Python scalars and the stacked leading dimensions of :func:`matmul`.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "AxisError",
    "RankError",
    "Tensor",
    "tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "tanh",
    "abs",
    "log",
    "clip",
    "add_bias",
    "row_normalize",
    "normalize_rows",
    "softmax",
    "sum",
    "mean",
    "mean_abs",
    "l2_norm",
    "reshape",
    "transpose",
    "slice_axis",
    "pad_axis",
    "causal_conv_time",
    "dilated_causal_conv1d",
    "zero_grad",
]

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence[Optional[Array]]]

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


class ShapeError(ValueError):
    """Operand shapes do not conform."""


class AxisError(ValueError):
    """Reduction axis outside the tensor's rank."""


class RankError(ValueError):
    """A scalar was required."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording inside the block (inference, finite differences)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    """An n-dimensional float64 array that can take part in differentiation.

    ``data`` is a C-contiguous numpy array; ``grad`` is ``None`` until a
    backward pass reaches the tensor, then an array of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[Array] = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[BackwardFn] = None

    @classmethod
    def _result(cls, data: Array, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=np.float64)
        out.grad = None
        out.name = None
        track = _grad_enabled.get() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
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
    def is_leaf(self) -> bool:
        return not self._parents

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> Array:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise RankError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(neg(self), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; use row_normalize or scale")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(_as_tensor(other), self)

    # method forms of the functional API
    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return abs(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- differentiation --------------------------------------------------
    def backward(self, grad: Optional[Array] = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        ``self`` must hold exactly one element.  Leaves used along several
        paths receive the sum of the path gradients.
        """
        if self.data.size != 1:
            raise RankError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        seed = np.ones_like(self.data) if grad is None else np.asarray(grad, dtype=np.float64).reshape(self.shape)

        order = _topological_order(self)
        grads: dict[int, Array] = {id(self): seed}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
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


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative post-order DFS; every node appears after all of its parents
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


def tensor(data, requires_grad: bool = False, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_axis(x: Tensor, axis) -> Optional[tuple[int, ...]]:
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -x.ndim <= ax < max(x.ndim, 1):
            raise AxisError(f"axis {ax} out of range for tensor of rank {x.ndim}")
        out.append(ax % x.ndim if x.ndim else 0)
    return tuple(out)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast.

    ``(m, k) @ (k, n)`` is the plain case.  ``(n, n) @ (B, T, n, D)`` applies
    the left matrix to every slice, which is how graph operators hit
    batched features.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    a_data, bd = a.data, b.data
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_right(a, b)
    if a.ndim == 2 and b.ndim > 2:
        return _matmul_left(a, b)
    try:
        out = np.matmul(a_data, bd)
    except ValueError as exc:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} @ {b.shape}") from exc

    def backward(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a_data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a_data.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return Tensor._result(out, (a, b), backward)


def _matmul_right(a: Tensor, b: Tensor) -> Tensor:
    # (..., m, k) @ (k, n): one GEMM over the flattened leading axes
    k, n = b.shape
    a2 = a.data.reshape(-1, k)
    bd = b.data
    out = (a2 @ bd).reshape(a.shape[:-1] + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ bd.T).reshape(a.shape) if a.requires_grad else None
        gb = a2.T @ g2 if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward)


def _matmul_left(a: Tensor, b: Tensor) -> Tensor:
    # (m, k) @ (..., k, n): move k to the front so the product is one GEMM
    m, k = a.shape
    lead, n = b.shape[:-2], b.shape[-1]
    perm = (b.ndim - 2,) + tuple(range(b.ndim - 2)) + (b.ndim - 1,)
    b2 = np.ascontiguousarray(np.transpose(b.data, perm)).reshape(k, -1)
    a_data = a.data
    back = tuple(range(1, b.ndim - 1)) + (0, b.ndim - 1)

    def unflatten(x2, rows):
        return np.transpose(x2.reshape((rows,) + lead + (n,)), back)

    out = unflatten(a_data @ b2, m)

    def backward(g):
        g2 = np.ascontiguousarray(np.transpose(g, perm)).reshape(m, -1)
        ga = g2 @ b2.T if a.requires_grad else None
        gb = unflatten(a_data.T @ g2, k) if b.requires_grad else None
        return ga, gb

    return Tensor._result(out, (a, b), backward)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------
def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(x: Tensor) -> Tensor:
    return Tensor._result(-x.data, (x,), lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return Tensor._result(x.data + float(c), (x,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = x.data > 0
    return Tensor._result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor._result(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._result(out, (x,), lambda g: (g * (1.0 - out * out),))


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    sign = np.sign(x.data)
    return Tensor._result(np.abs(x.data), (x,), lambda g: (g * sign,))


def log(x: Tensor) -> Tensor:
    d = x.data
    return Tensor._result(np.log(d), (x,), lambda g: (g / d,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp into ``[lo, hi]``; gradient passes only where no clamping happened."""
    inside = (x.data >= lo) & (x.data <= hi)
    return Tensor._result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def add_bias(x: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Add a 1-D bias along one axis of ``x``."""
    if b.ndim != 1:
        raise ShapeError(f"add_bias: bias must be 1-D, got {b.shape}")
    axes = _check_axis(x, axis)
    ax = axes[0]
    if x.shape[ax] != b.shape[0]:
        raise ShapeError(f"add_bias: axis {ax} of {x.shape} does not match bias {b.shape}")
    view = [1] * x.ndim
    view[ax] = b.shape[0]
    others = tuple(i for i in range(x.ndim) if i != ax)
    return Tensor._result(x.data + b.data.reshape(view), (x, b), lambda g: (g, g.sum(axis=others)))


# ---------------------------------------------------------------------------
# normalizations
# ---------------------------------------------------------------------------
def row_normalize(a: Tensor) -> Tensor:
    """Divide each row of a 2-D matrix by its sum (rows must sum to nonzero)."""
    if a.ndim != 2:
        raise ShapeError(f"row_normalize expects a matrix, got {a.shape}")
    s = a.data.sum(axis=1, keepdims=True)
    if np.any(s == 0):
        raise ZeroDivisionError("row_normalize: a row sums to zero")
    out = a.data / s

    def backward(g):
        return (g / s - (g * out).sum(axis=1, keepdims=True) / s,)

    return Tensor._result(out, (a,), backward)


def normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of a matrix to unit L2 norm; rows with norm < eps become 0."""
    if x.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got {x.shape}")
    n = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    live = n >= eps
    inv = np.where(live, 1.0 / np.where(live, n, 1.0), 0.0)
    out = x.data * inv

    def backward(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) * inv,)

    return Tensor._result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax.  NaN inputs propagate NaN."""
    (ax,) = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return Tensor._result(out, (x,), backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------
def _expand(g: Array, shape: tuple[int, ...], axes: Optional[tuple[int, ...]]) -> Array:
    if axes is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001
    axes = _check_axis(x, axis)
    shape = x.shape
    return Tensor._result(x.data.sum(axis=axes), (x,), lambda g: (_expand(g, shape, axes).copy(),))


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _check_axis(x, axis)
    shape = x.shape
    count = x.data.size if axes is None else int(np.prod([shape[a] for a in axes]))
    if count == 0:
        return sum(x, axis)
    return Tensor._result(
        x.data.mean(axis=axes), (x,), lambda g: (_expand(g, shape, axes) / count,)
    )


def mean_abs(x: Tensor, axis=None) -> Tensor:
    return mean(abs(x), axis)


def l2_norm(x: Tensor, axis=None) -> Tensor:
    """Euclidean norm; the norm of an all-zero slice is 0 with zero gradient."""
    axes = _check_axis(x, axis)
    shape = x.shape
    out = np.sqrt((x.data * x.data).sum(axis=axes))
    xd = x.data

    def backward(g):
        o = out if axes is None else np.expand_dims(out, axes)
        safe = np.where(o > 0, o, 1.0)
        return (np.where(o > 0, _expand(g, shape, axes) * xd / safe, 0.0),)

    return Tensor._result(out, (x,), backward)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from exc
    return Tensor._result(out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        if x.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise AxisError(f"invalid permutation {axes} for rank {x.ndim}")
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def slice_axis(x: Tensor, axis: int, start: int, stop: Optional[int] = None) -> Tensor:
    """``x[..., start:stop, ...]`` along one axis."""
    (ax,) = _check_axis(x, axis)
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return Tensor._result(x.data[idx], (x,), backward)


def pad_axis(x: Tensor, axis: int, before: int, after: int = 0) -> Tensor:
    """Zero-pad one axis."""
    (ax,) = _check_axis(x, axis)
    width = [(0, 0)] * x.ndim
    width[ax] = (before, after)
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(before, before + x.shape[ax])
    idx = tuple(idx)
    return Tensor._result(np.pad(x.data, width), (x,), lambda g: (g[idx],))


# ---------------------------------------------------------------------------
# temporal convolution
# ---------------------------------------------------------------------------
def causal_conv_time(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Valid-mode causal dilated convolution along axis 1 of a channels-last tensor.

    ``x`` is ``(B, T, ..., D_in)`` and ``w`` is ``(D_out, D_in, K)``; the
    result is ``(B, T', ..., D_out)`` with ``T' = T - (K-1)*dilation``.
    Tap ``j`` of the filter multiplies the input ``j * dilation`` steps
    before the output's own step, so output ``t`` (aligned with input step
    ``t + (K-1)*dilation``) never reads anything later.
    """
    if x.ndim < 3 or w.ndim != 3:
        raise ShapeError(f"conv expects (B, T, ..., D_in) and (D_out, D_in, K), got {x.shape}, {w.shape}")
    if dilation < 1:
        raise ValueError(f"dilation must be positive, got {dilation}")
    t, d_in = x.shape[1], x.shape[-1]
    d_out, w_in, k = w.shape
    if w_in != d_in:
        raise ShapeError(f"conv: input channels {d_in} vs filter channels {w_in}")
    span = (k - 1) * dilation
    if t < span + 1:
        raise ValueError(f"conv: series of length {t} is shorter than receptive field {span + 1}")
    t_out = t - span
    xd, wd = x.data, w.data
    out_shape = (x.shape[0], t_out) + x.shape[2:-1] + (d_out,)
    # contiguous copies: strided operands make numpy skip BLAS
    wk = [np.ascontiguousarray(wd[:, :, j]) for j in range(k)]
    starts = [(k - 1 - j) * dilation for j in range(k)]
    taps = [np.ascontiguousarray(xd[:, s : s + t_out]).reshape(-1, d_in) for s in starts]
    acc = taps[0] @ wk[0].T
    for j in range(1, k):
        acc += taps[j] @ wk[j].T
    out = acc.reshape(out_shape)

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = gw = None
        if x.requires_grad:
            gx = np.zeros_like(xd)
            tap_shape = (x.shape[0], t_out) + x.shape[2:]
            for j in range(k):
                gx[:, starts[j] : starts[j] + t_out] += (g2 @ wk[j]).reshape(tap_shape)
        if w.requires_grad:
            gw = np.empty_like(wd)
            for j in range(k):
                gw[:, :, j] = g2.T @ taps[j]
        return gx, gw

    return Tensor._result(out, (x, w), backward)


def dilated_causal_conv1d(x: Tensor, w: Tensor, dilation: int = 1) -> Tensor:
    """Causal dilated convolution for channels-first ``(N, D_in, T)`` input.

    Returns ``(N, D_out, T - (K-1)*dilation)``; see :func:`causal_conv_time`.
    """
    if x.ndim != 3:
        raise ShapeError(f"conv1d expects (N, D_in, T), got {x.shape}")
    y = causal_conv_time(transpose(x, (0, 2, 1)), w, dilation)
    return transpose(y, (0, 2, 1))
