"""Dense numpy tensors with a recording tape for reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad``, are appended to the tape.  Outside a tape
the same functions run as plain numpy arithmetic, which is what evaluation
uses.

Only the primitives the flow model needs are provided: elementwise math with
limited broadcasting, 2-D matmul, concatenation, row gathers and segment
reductions keyed by integer group ids.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """A backward pass was requested for a value the tape did not produce."""


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nesting is allowed and the innermost tape wins.
    """

    def __init__(self) -> None:
        self.records: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        top = _ACTIVE.pop()
        assert top is self, "tapes must be exited in LIFO order"

    def __len__(self) -> int:
        return len(self.records)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "parents", "grad_fn", "tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.name = name
        self.parents: tuple[Tensor, ...] = ()
        self.grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out = Tensor(data, requires_grad=True)
        out.parents = parents
        out.grad_fn = grad_fn
        out.tape = tape
        tape.records.append(out)
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # plain numbers adopt the dtype of the tensor operand
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _record(out, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    positive = x.data > 0
    out = np.where(positive, x.data, x.data * slope).astype(x.dtype, copy=False)
    return _record(out, (x,), lambda g: (np.where(positive, g, g * slope),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _record(np.log(x.data), (x,), lambda g: (g / x.data,))


# reductions and shape ------------------------------------------------------

def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    out = np.sum(x.data, axis=axis)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _record(np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = np.asarray(x.data.mean(), dtype=x.dtype)
    return _record(out, (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        lhs = a.name or "lhs"
        rhs = b.name or "rhs"
        raise DimensionError(f"matmul: {lhs} has width {a.shape[1]} but {rhs} has {b.shape[0]} rows")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _record(a.data @ b.data, (a, b), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    splits = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(out, tensors, grad_fn)


def gather(x: Tensor, index: np.ndarray) -> Tensor:
    """Rows of ``x`` selected by ``index`` (repeats allowed)."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]

    def grad_fn(g):
        return (_segment_sum_np(g, index, n).astype(x.dtype, copy=False),)

    return _record(x.data[index], (x,), grad_fn)


# segment reductions --------------------------------------------------------

def _check_segments(ids: np.ndarray, length: int, num_segments: int) -> None:
    if ids.shape[0] != length:
        raise DimensionError(f"segment ids have length {ids.shape[0]} but values have {length} rows")
    if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
        raise IndexError(f"segment id out of range [0, {num_segments})")


def _segment_sum_np(values: np.ndarray, ids: np.ndarray, num_segments: int) -> np.ndarray:
    """Segment sum accumulated in float64."""
    out = np.zeros((num_segments,) + values.shape[1:], dtype=np.float64)
    if values.ndim == 1:
        if ids.size:
            out += np.bincount(ids, weights=values, minlength=num_segments)
        return out
    np.add.at(out, ids, values)
    return out


def segment_counts(ids: np.ndarray, num_segments: int) -> np.ndarray:
    return np.bincount(np.asarray(ids, dtype=np.int64), minlength=num_segments)


def segment_sum(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    ids = np.asarray(segment_ids, dtype=np.int64)
    _check_segments(ids, values.shape[0], num_segments)
    out = _segment_sum_np(values.data, ids, num_segments).astype(values.dtype)
    return _record(out, (values,), lambda g: (g[ids],))


def segment_sum_scaled(values: Tensor, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Per-segment sum divided by the square root of the member count.

    Segments without members produce zero rows.
    """
    ids = np.asarray(segment_ids, dtype=np.int64)
    _check_segments(ids, values.shape[0], num_segments)
    counts = segment_counts(ids, num_segments)
    scale = 1.0 / np.sqrt(np.maximum(counts, 1))
    if values.ndim > 1:
        scale = scale.reshape((-1,) + (1,) * (values.ndim - 1))
    out = (_segment_sum_np(values.data, ids, num_segments) * scale).astype(values.dtype)
    row_scale = scale[ids].astype(values.dtype)
    return _record(out, (values,), lambda g: (g[ids] * row_scale,))


def segment_softmax(logits: Tensor, segment_ids: np.ndarray, num_segments: int | None = None) -> Tensor:
    """Softmax of a 1-D tensor within each group of equal segment id."""
    ids = np.asarray(segment_ids, dtype=np.int64)
    if logits.ndim != 1:
        raise DimensionError(f"segment_softmax expects 1-D logits, got {logits.shape}")
    if num_segments is None:
        num_segments = int(ids.max()) + 1 if ids.size else 0
    _check_segments(ids, logits.shape[0], num_segments)
    if ids.size == 0:
        return _record(logits.data.copy(), (logits,), lambda g: (g,))
    x = logits.data.astype(np.float64)
    peak = np.full(num_segments, -np.inf)
    np.maximum.at(peak, ids, x)
    e = np.exp(x - peak[ids])
    total = np.bincount(ids, weights=e, minlength=num_segments)
    y64 = e / total[ids]
    out = y64.astype(logits.dtype)

    def grad_fn(g):
        gy = g.astype(np.float64) * y64
        inner = np.bincount(ids, weights=gy, minlength=num_segments)
        return ((gy - y64 * inner[ids]).astype(logits.dtype),)

    return _record(out, (logits,), grad_fn)


# backward ------------------------------------------------------------------

def backward(tape: Tape, loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> dict | list:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    ``params`` may be a name->tensor mapping (a dict keyed the same way is
    returned) or a sequence (a list is returned).  Parameters the loss does
    not depend on get exact zeros.
    """
    if loss.data.size != 1:
        raise DimensionError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.tape is not tape:
        raise TapeError("loss was not produced by this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec), None)
        if g is None:
            continue
        for parent, pg in zip(rec.parents, rec.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg

    def lookup(p: Tensor) -> np.ndarray:
        g = grads.get(id(p))
        if g is None:
            return np.zeros_like(p.data)
        return np.asarray(g, dtype=p.dtype).reshape(p.shape)

    if isinstance(params, Mapping):
        return {name: lookup(p) for name, p in params.items()}
    return [lookup(p) for p in params]
