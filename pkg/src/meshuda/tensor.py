"""Small dense tensor library with tape-based reverse-mode differentiation.

Tensors wrap rank-0 to rank-2 numpy arrays. Operations executed while a
:class:`Tape` is active are recorded in execution order; :func:`backward`
replays them in reverse and returns gradients for the leaf parameters.
Outside a tape, operations only compute values, which is what inference and
evaluation use.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .exceptions import DegenerateSegmentError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "set_default_dtype",
    "get_default_dtype",
    "parameter",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "relu",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "concat",
    "transpose",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "take_rows",
    "segment_mean",
    "segment_max",
    "RowIndex",
    "Segments",
    "l2_norm",
    "clip_by_norm",
    "gelu",
]

_default_dtype = np.float64
_state = threading.local()


def set_default_dtype(dtype) -> None:
    """Switch the floating precision used for new tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}")
    _default_dtype = dtype


def get_default_dtype():
    return _default_dtype


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a NaN/Inf anywhere makes the sum non-finite; overflow of a finite sum is rechecked
    with np.errstate(over="ignore", invalid="ignore"):
        total = np.sum(arr)
    if not np.isfinite(total) and not np.isfinite(arr).all():
        raise NumericError(f"non-finite values produced by {what}")


class Tensor:
    """An immutable array value, optionally a trainable leaf."""

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most rank 2, got shape {arr.shape}")
        if any(s == 0 for s in arr.shape):
            raise ShapeError(f"tensor extents must be positive, got shape {arr.shape}")
        _check_finite(arr, "tensor construction")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool, what: str) -> "Tensor":
        # fast path for op outputs: skips the rank/extent checks done in __init__
        arr = np.asarray(arr)
        _check_finite(arr, what)
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.requires_grad = requires_grad
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.shape[0]

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; every differentiable operation executed inside
    the ``with`` block is appended to :attr:`records`.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def _active_tape() -> Tape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def _emit(arr: np.ndarray, inputs: tuple, vjp: Callable, what: str) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    tape = _active_tape() if needs else None
    out = Tensor._wrap(arr, needs and tape is not None, what)
    if tape is not None:
        tape.records.append((out, inputs, vjp))
    return out


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise and linear algebra

def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _emit(ad @ bd, (a, b), vjp, "matmul")


def _broadcast_shape(a: Tensor, b: Tensor, what: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{what}: cannot broadcast {a.shape} with {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return _emit(a.data + b.data, (a, b), vjp, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def vjp(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return _emit(a.data - b.data, (a, b), vjp, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _emit(ad * bd, (a, b), vjp, "mul")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,), "neg")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _emit(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)
    return _emit(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _emit(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _emit(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x)
    return _emit(y, (a,), lambda g: (g / x,), "log")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(a) -> Tensor:
    """Tanh-form GELU, ``0.5 x (1 + tanh(c (x + 0.044715 x^3)))``."""
    a = _as_tensor(a)
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5

    def vjp(g):
        # 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 * 0.044715 x^2)
        d = x2 * (3.0 * 0.044715)
        d += 1.0
        d *= _GELU_C
        d *= x
        d *= 1.0 - t * t
        d += 1.0 + t
        d *= 0.5
        d *= g
        return (d,)

    return _emit(y, (a,), vjp, "gelu")


# ---------------------------------------------------------------------------
# shape and reductions

def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    return _emit(np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,), "transpose")


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat of an empty sequence")
    if any(t.data.ndim != 2 for t in ts):
        raise ShapeError("concat needs rank-2 tensors")
    other = 1 - axis
    if len({t.shape[other] for t in ts}) != 1:
        raise ShapeError(f"concat extents differ along axis {other}: {[t.shape for t in ts]}")
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in ts], axis=axis), ts, vjp, "concat")


def _reduced_shape(shape, axis, keepdims):
    if axis is None:
        return (1, 1) if keepdims and len(shape) == 2 else ()
    s = list(shape)
    if keepdims:
        s[axis] = 1
    else:
        del s[axis]
    return tuple(s)


def reduce_sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(y), (a,), vjp, "reduce_sum")


def reduce_mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return mul(reduce_sum(a, axis, keepdims), 1.0 / n)


def reduce_max(a, axis: int = 0, keepdims: bool = False) -> Tensor:
    """Maximum along an axis; the gradient goes to the first maximal entry."""
    a = _as_tensor(a)
    x = a.data
    idx = np.argmax(x, axis=axis)
    y = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
    if not keepdims:
        y = np.squeeze(y, axis=axis)

    def vjp(g):
        out = np.zeros_like(x)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(out, np.expand_dims(idx, axis), gg, axis=axis)
        return (out,)

    return _emit(y, (a,), vjp, "reduce_max")


def _selection_matrix(index: np.ndarray, n_cols: int, weights=None) -> sp.csr_matrix:
    rows = np.arange(len(index))
    w = np.ones(len(index)) if weights is None else weights
    return sp.csr_matrix((w, (rows, index)), shape=(len(index), n_cols))


class RowIndex:
    """Row index reused across many gathers; caches its scatter matrix."""

    def __init__(self, index, n_rows: int):
        self.index = np.asarray(index, dtype=np.int64)
        self.n_rows = n_rows
        if self.index.size and (self.index.min() < 0 or self.index.max() >= n_rows):
            raise ShapeError(f"row index out of range for {n_rows} rows")
        self._scatter = None

    @property
    def scatter(self) -> sp.csr_matrix:
        if self._scatter is None:
            self._scatter = _selection_matrix(self.index, self.n_rows).T.tocsr()
        return self._scatter


class Segments:
    """Segment ids with their counts and cached averaging matrices."""

    def __init__(self, segment_ids, num_segments: int, n_rows: int | None = None):
        ids = np.asarray(segment_ids, dtype=np.int64)
        n_rows = ids.shape[0] if n_rows is None else n_rows
        if ids.shape != (n_rows,):
            raise ShapeError(f"expected {n_rows} segment ids, got {ids.shape}")
        if ids.size and (ids.min() < 0 or ids.max() >= num_segments):
            raise ShapeError(f"segment ids must lie in [0, {num_segments})")
        counts = np.bincount(ids, minlength=num_segments)
        if (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            raise DegenerateSegmentError(f"segment {empty} has no members")
        self.ids = ids
        self.num_segments = num_segments
        self.counts = counts
        self._mean = None

    @property
    def mean_matrix(self):
        if self._mean is None:
            avg = _selection_matrix(self.ids, self.num_segments, 1.0 / self.counts[self.ids]).T.tocsr()
            self._mean = (avg, avg.T.tocsr())
        return self._mean


def take_rows(a, index) -> Tensor:
    """Gather rows ``a[index]``; the backward pass scatter-adds into ``a``."""
    a = _as_tensor(a)
    n = a.shape[0]
    ri = index if isinstance(index, RowIndex) else RowIndex(index, n)
    if ri.n_rows != n:
        raise ShapeError(f"row index built for {ri.n_rows} rows, tensor has {n}")
    dtype = a.data.dtype

    def vjp(g):
        return (np.asarray(ri.scatter @ g, dtype=dtype),)

    return _emit(a.data[ri.index], (a,), vjp, "take_rows")


def segment_mean(values, segment_ids, num_segments: int | None = None) -> Tensor:
    """Mean of the rows sharing each segment id."""
    values = _as_tensor(values)
    if values.data.ndim != 2:
        raise ShapeError("segment_mean needs a rank-2 tensor")
    if isinstance(segment_ids, Segments):
        seg = segment_ids
        if seg.ids.shape[0] != values.shape[0]:
            raise ShapeError("segment ids do not match the number of rows")
    else:
        seg = Segments(segment_ids, num_segments, values.shape[0])
    avg, avg_t = seg.mean_matrix
    dtype = values.data.dtype

    def vjp(g):
        return (np.asarray(avg_t @ g, dtype=dtype),)

    return _emit(np.asarray(avg @ values.data, dtype=dtype), (values,), vjp, "segment_mean")


def segment_max(values, segment_ids, num_segments: int | None = None) -> Tensor:
    """Column-wise maximum over the rows of each segment."""
    values = _as_tensor(values)
    if values.data.ndim != 2:
        raise ShapeError("segment_max needs a rank-2 tensor")
    seg = segment_ids if isinstance(segment_ids, Segments) else Segments(segment_ids, num_segments, values.shape[0])
    ids, counts, num_segments = seg.ids, seg.counts, seg.num_segments
    x = values.data
    order = np.argsort(ids, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    xs = x[order]
    y = np.maximum.reduceat(xs, starts, axis=0)
    # first row attaining the maximum within each segment, per column
    hit = xs == y[ids[order]]
    pos = np.where(hit, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(pos, starts, axis=0)
    winners = order[first]

    def vjp(g):
        out = np.zeros_like(x)
        cols = np.broadcast_to(np.arange(x.shape[1]), winners.shape)
        out[winners, cols] = g
        return (out,)

    return _emit(y, (values,), vjp, "segment_max")


def l2_norm(a) -> Tensor:
    """Euclidean norm of all entries; the gradient at the origin is taken as zero."""
    a = _as_tensor(a)
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))

    def vjp(g):
        if n == 0.0:
            return (np.zeros_like(x),)
        return (g * x / n,)

    return _emit(np.asarray(n, dtype=x.dtype), (a,), vjp, "l2_norm")


def clip_by_norm(a, max_norm: float) -> Tensor:
    """Rescale ``a`` so its Euclidean norm does not exceed ``max_norm``."""
    a = _as_tensor(a)
    x = a.data
    n = float(np.sqrt(np.sum(x * x)))
    if n <= max_norm:
        return _emit(x.copy(), (a,), lambda g: (g,), "clip_by_norm")
    scale = max_norm / n

    def vjp(g):
        # d/dx (c x / |x|) = c/|x| (g - x (x.g)/|x|^2)
        return (scale * (g - x * np.sum(x * g) / (n * n)),)

    return _emit(x * scale, (a,), vjp, "clip_by_norm")


def custom_op(a, forward: np.ndarray, vjp: Callable, what: str) -> Tensor:
    """Record a user-defined unary op (used for gradient reversal)."""
    a = _as_tensor(a)
    return _emit(forward, (a,), lambda g: (vjp(g),), what)


# ---------------------------------------------------------------------------
# differentiation

def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse-mode sweep over ``tape`` starting from a scalar ``loss``.

    Returns a dict mapping each leaf parameter to its gradient array. Leaves
    listed in ``params`` that the loss does not depend on get zeros.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves: dict[int, Tensor] = {}
    for out, inputs, vjp in reversed(tape.records):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            leaves.setdefault(key, inp)
    result = {}
    for key, t in leaves.items():
        if key not in produced:
            result[t] = grads.get(key, np.zeros_like(t.data))
    if params is not None:
        params = list(params)
        return {p: result.get(p, np.zeros_like(p.data)) for p in params}
    return result


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Largest relative disagreement between tape gradients and central differences.

    The error for coordinate i is |analytic_i - numeric_i| / max(1, |numeric_i|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=_default_dtype)
    leaf = parameter(x0)
    with Tape() as tape:
        out = f(leaf)
    analytic = backward(out, tape, [leaf])[leaf]
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for i in range(flat.size):
        hi = flat.copy()
        lo = flat.copy()
        hi[i] += step
        lo[i] -= step
        try:
            fp = f(Tensor(hi.reshape(x0.shape))).item()
            fm = f(Tensor(lo.reshape(x0.shape))).item()
        except NumericError as exc:
            raise NumericError(f"non-finite evaluation at coordinate {i}") from exc
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite evaluation at coordinate {i}")
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
