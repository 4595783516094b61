"""Reverse-mode automatic differentiation over dense numpy arrays.

Values live in numpy arrays at a process-wide default precision (float32 for
training speed, float64 for gradient verification). Operations executed while
a :class:`Tape` is active are recorded together with a local-gradient closure;
:func:`backward` replays the tape in reverse and accumulates gradients into
the participating leaf tensors.

Broadcasting is deliberately narrow: binary operations accept identical
shapes, a scalar on either side, or one operand whose shape is a trailing
suffix of the other (leading-batch broadcast). Anything else requires an
explicit :func:`expand` or :func:`reshape`.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidArgumentError, NumericDomainError, ShapeError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "tensor",
    "constant",
    "record",
    "backward",
    "set_default_dtype",
    "default_dtype",
    "using_dtype",
    "set_finite_checks",
    "neg_sentinel",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "relu",
    "sigmoid",
    "tanh",
    "exp",
    "log",
    "sqrt",
    "matmul",
    "transpose_last2",
    "swapaxes",
    "reshape",
    "expand",
    "concat",
    "sum_",
    "amax",
    "gather_rows",
    "masked_fill",
    "scaled_softmax",
    "log_softmax",
]

_state = threading.local()


def _dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


def default_dtype() -> np.dtype:
    """Current process-wide dtype used by tensor constructors."""
    return _dtype()


def set_default_dtype(name) -> None:
    dt = np.dtype(name)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InvalidArgumentError(f"unsupported dtype {name!r}; use float32 or float64")
    _state.dtype = dt


@contextlib.contextmanager
def using_dtype(name):
    """Temporarily switch the default precision (e.g. float64 for grad checks)."""
    prev = _dtype()
    set_default_dtype(name)
    try:
        yield
    finally:
        _state.dtype = prev


def set_finite_checks(enabled: bool) -> None:
    """Validate every operation output for finiteness (slow; for tests)."""
    _state.finite_checks = bool(enabled)


def _finite_checks() -> bool:
    return getattr(_state, "finite_checks", False)


def neg_sentinel(dtype=None) -> float:
    """Most negative representable value; pre-softmax fill for masked slots."""
    return float(np.finfo(dtype or _dtype()).min)


class Tensor:
    """A dense array with optional gradient accumulation.

    Outputs of operations are locked read-only; leaves (user-created tensors
    and parameters) stay writable so the optimizer can update them between
    steps. Leaves with ``requires_grad`` carry a zero-initialized ``grad``
    accumulator of the same shape.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _lock: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _dtype())
        if _lock:
            arr = arr.view()
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad and not _lock else None

    @property
    def shape(self):
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routed through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


class Parameter(Tensor):
    """A named leaf tensor with a gradient accumulator.

    Names are slash-separated paths (``module/layer/slot``) and must be unique
    within a model.
    """

    __slots__ = ("name",)

    def __init__(self, name: str, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out: Tensor, parents: tuple, backward_fn: Callable):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed operations (execution order is topological)."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(self, loss)


def _tapes() -> list:
    st = getattr(_state, "tapes", None)
    if st is None:
        st = []
        _state.tapes = st
    return st


@contextlib.contextmanager
def record():
    """Activate a fresh tape; ops executed inside are recorded onto it."""
    tape = Tape()
    _tapes().append(tape)
    try:
        yield tape
    finally:
        _tapes().pop()


def _active_tape():
    st = _tapes()
    return st[-1] if st else None


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every requires-grad leaf on the tape.

    Leaves not on a path to the loss keep their (zero) accumulators.
    """
    if not isinstance(loss, Tensor):
        raise InvalidArgumentError("loss must be a Tensor")
    if loss.size != 1:
        raise InvalidArgumentError(f"loss must be scalar, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = {id(node.out) for node in tape.nodes}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, pg in node.backward_fn(g):
            if not parent.requires_grad:
                continue
            if id(parent) in produced:
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            else:
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += pg
    # loss may itself be a leaf (e.g. loss = parameter)
    residual = grads.pop(id(loss), None)
    if residual is not None and loss.requires_grad and id(loss) not in produced:
        if loss.grad is None:
            loss.grad = np.zeros_like(loss.data)
        loss.grad += residual


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    """Wrap data as a non-differentiable tensor (masks, lookup ids excluded)."""
    return Tensor(data, requires_grad=False, dtype=dtype)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype()))


def _from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if _finite_checks() and not np.all(np.isfinite(data)):
        raise NumericDomainError("operation produced non-finite values")
    tape = _active_tape()
    requires = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires, _lock=True)
    if requires:
        tape.nodes.append(_Node(out, tuple(parents), backward_fn))
    return out


def _check_binary_shapes(a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    # leading-batch broadcast: one shape is a trailing suffix of the other
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"shapes {sa} and {sb} are not broadcastable (leading-batch only)")


def _check_dtypes(a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise ShapeError(f"mixed dtypes {a.dtype} and {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return g.sum()
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes(a, b)
    _check_binary_shapes(a, b)
    out = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _from_op(out, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes(a, b)
    _check_binary_shapes(a, b)
    out = a.data - b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape)))

    return _from_op(out, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes(a, b)
    _check_binary_shapes(a, b)
    out = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.shape)),
            (b, _unbroadcast(g * a.data, b.shape)),
        )

    return _from_op(out, (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_dtypes(a, b)
    _check_binary_shapes(a, b)
    if np.any(b.data == 0):
        raise NumericDomainError("division by zero")
    out = a.data / b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g / b.data, a.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        )

    return _from_op(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _from_op(-a.data, (a,), lambda g: ((a, -g),))


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0)

    def bwd(g):
        return ((a, g * (a.data > 0)),)

    return _from_op(out, (a,), bwd)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    with np.errstate(over="ignore"):
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)

    def bwd(g):
        return ((a, g * out * (1.0 - out)),)

    return _from_op(out, (a,), bwd)


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = np.tanh(a.data)

    def bwd(g):
        return ((a, g * (1.0 - out * out)),)

    return _from_op(out, (a,), bwd)


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)

    def bwd(g):
        return ((a, g * out),)

    return _from_op(out, (a,), bwd)


def log(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data <= 0):
        raise NumericDomainError("log of non-positive value")
    out = np.log(a.data)

    def bwd(g):
        return ((a, g / a.data),)

    return _from_op(out, (a,), bwd)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    if np.any(a.data < 0):
        raise NumericDomainError("sqrt of negative value")
    out = np.sqrt(a.data)

    def bwd(g):
        return ((a, g * 0.5 / out),)

    return _from_op(out, (a,), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Accepts 2-D x 2-D, stacked x 2-D (the 2-D operand shared across leading
    dims), or stacks with identical leading dims.
    """
    a, b = _wrap(a), _wrap(b)
    _check_dtypes(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"inner dims differ: {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"leading dims differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bwd(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2 and a.ndim > 2:
            n, k = a.shape[-2], a.shape[-1]
            m = b.shape[-1]
            a2 = a.data.reshape(-1, n, k)
            g2 = g.reshape(-1, n, m)
            gb = np.einsum("bnk,bnm->km", a2, g2)
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, ga), (b, gb))

    return _from_op(out, (a, b), bwd)


def transpose_last2(a) -> Tensor:
    a = _wrap(a)
    if a.ndim < 2:
        raise ShapeError("transpose_last2 needs ndim >= 2")
    out = np.swapaxes(a.data, -1, -2).copy()

    def bwd(g):
        return ((a, np.swapaxes(g, -1, -2)),)

    return _from_op(out, (a,), bwd)


def swapaxes(a, axis1: int, axis2: int) -> Tensor:
    a = _wrap(a)
    out = np.swapaxes(a.data, axis1, axis2).copy()

    def bwd(g):
        return ((a, np.swapaxes(g, axis1, axis2)),)

    return _from_op(out, (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(a.shape)),)

    return _from_op(out, (a,), bwd)


def expand(a, shape) -> Tensor:
    """Explicit broadcast to `shape` (numpy rules); gradient sums back."""
    a = _wrap(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        lead = len(shape) - a.ndim
        if lead:
            g = g.sum(axis=tuple(range(lead)))
        reduce_axes = tuple(i for i, d in enumerate(a.shape) if d == 1 and g.shape[i] != 1)
        if reduce_axes:
            g = g.sum(axis=reduce_axes, keepdims=True)
        return ((a, g),)

    return _from_op(out, (a,), bwd)


def concat(parts: Iterable, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    if not parts:
        raise InvalidArgumentError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(zip(parts, pieces))

    return _from_op(out, tuple(parts), bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return ((a, np.broadcast_to(g, a.shape).copy()),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).copy()),)

    return _from_op(np.asarray(out), (a,), bwd)


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; gradient routes to the first maximal entry."""
    a = _wrap(a)
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        ga = np.zeros_like(a.data)
        np.put_along_axis(ga, np.expand_dims(idx, axis), g, axis=axis)
        return ((a, ga),)

    return _from_op(out, (a,), bwd)


def gather_rows(table, ids) -> Tensor:
    """Row lookup `table[ids]`; gradient scatter-adds into the table."""
    table = _wrap(table)
    if table.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D table, got {table.shape}")
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise InvalidArgumentError("ids must be integers")
    out = table.data[ids]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return ((table, gt),)

    return _from_op(out, (table,), bwd)


def masked_fill(a, mask, value: float) -> Tensor:
    """Replace entries where `mask` is true by `value`; their gradient is 0."""
    a = _wrap(a)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.dtype.type(value), a.data)
    if out.shape != a.shape:
        raise ShapeError(f"mask shape {mask.shape} does not broadcast onto {a.shape}")

    def bwd(g):
        return ((a, np.where(mask, 0, g)),)

    return _from_op(out, (a,), bwd)


def _softmax_forward(data: np.ndarray, scale: float, axis: int) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = scale * data
    if np.isposinf(z).any():
        raise NumericDomainError("softmax input overflow")
    m = z.max(axis=axis, keepdims=True)
    if np.isneginf(m).any():
        raise InvalidArgumentError("softmax over a fully masked axis")
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def scaled_softmax(a, scale: float = 1.0, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax(scale * a) along `axis`."""
    a = _wrap(a)
    if a.size == 0:
        raise InvalidArgumentError("softmax of empty input")
    if not np.isfinite(scale) or scale <= 0:
        raise InvalidArgumentError(f"scale must be positive and finite, got {scale}")
    if not np.all(np.isfinite(a.data)):
        raise NumericDomainError("softmax of non-finite input")
    out = _softmax_forward(a.data, scale, axis)

    def bwd(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return ((a, scale * out * (g - inner)),)

    return _from_op(out, (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    if a.size == 0:
        raise InvalidArgumentError("log_softmax of empty input")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bwd(g):
        p = np.exp(out)
        return ((a, g - p * g.sum(axis=axis, keepdims=True)),)

    return _from_op(out, (a,), bwd)
