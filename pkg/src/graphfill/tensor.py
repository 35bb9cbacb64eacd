"""Dense float64 arrays with recorded reverse-mode differentiation.

Operations run eagerly on numpy arrays. While a Tape is active, every
operation appends a record holding a closure that maps the output gradient
to input gradients; backward() replays the records in reverse order. With
no active tape, operations only compute values, which keeps repeated
forward evaluations (finite differences, benchmarks) cheap.

The op set is deliberately small: elementwise arithmetic, matmul against a
2-D weight, concat/reshape, relu/exp/abs/clamp, axis sums, row gather and
scatter, and contiguous-segment sum/repeat. That is enough for MLPs,
softmax attention over variable-size message sets, and training.

Every operation result must be finite; NaN or Inf raises immediately
rather than propagating. Leaves are exempt so that deliberately poisoned
(hidden) entries may sit in an input array as long as no op reads them.
"""

from __future__ import annotations

import ctypes

import numpy as np

from .errors import EmptySetError, NonFiniteError, ShapeError, TapeError

MAX_AXES = 3


def _keep_large_allocations_on_heap():
    """Stop glibc from handing big buffers back to the kernel.

    Every layer of every pass allocates multi-MB arrays; with default
    malloc tuning each one is a fresh mmap whose pages fault in on first
    write, which dominates runtime. Raising the mmap/trim thresholds
    keeps those buffers on the heap for reuse (measured ~5x on training
    steps). Best effort: silently skipped where glibc is unavailable.
    """
    try:
        libc = ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_keep_large_allocations_on_heap()

_ACTIVE_TAPE = None


class Tape:
    """Per-forward-pass record of operations.

    Exactly one tape may be active at a time; values created under it
    belong to it and cannot be mixed into another tape's operations.
    """

    def __init__(self):
        self.records = []  # (out, inputs, backfn)
        self.consumed = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise TapeError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False


class no_grad:
    """Suspend the active tape: operations inside compute values only."""

    def __enter__(self):
        global _ACTIVE_TAPE
        self._saved = _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._saved
        return False


class Value:
    """A float64 array (up to 3 axes) participating in a recorded computation."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > MAX_AXES:
            raise ShapeError(f"at most {MAX_AXES} axes supported, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Value(self.data.copy())

    def __repr__(self):
        return f"Value(shape={self.data.shape}, requires_grad={self.requires_grad})"

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


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _check_finite(arr):
    # A single non-finite entry makes the full sum non-finite (inf - inf
    # is NaN), so one reduction checks the whole array without allocating.
    if not np.isfinite(np.sum(arr)):
        raise NonFiniteError("non-finite values produced by a forward operation")


def _make_output(data, inputs, backfn):
    """Create the result Value and record it on the active tape."""
    _check_finite(data)
    out = Value(data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        for v in inputs:
            if v.tape is not None and v.tape is not tape:
                raise TapeError("operation mixes values from different tapes")
        if any(v.requires_grad for v in inputs):
            out.requires_grad = True
            out.tape = tape
            tape.records.append((out, inputs, backfn))
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b):
    a, b = as_value(a), as_value(b)
    data = a.data + b.data

    def backfn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make_output(data, (a, b), backfn)


def sub(a, b):
    a, b = as_value(a), as_value(b)
    data = a.data - b.data

    def backfn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make_output(data, (a, b), backfn)


def mul(a, b):
    a, b = as_value(a), as_value(b)
    data = a.data * b.data

    def backfn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make_output(data, (a, b), backfn)


def div(a, b):
    a, b = as_value(a), as_value(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backfn(g):
        ga = _unbroadcast(g / b.data, a.data.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
        return ga, gb

    return _make_output(data, (a, b), backfn)


def neg(a):
    a = as_value(a)
    return _make_output(-a.data, (a,), lambda g: (-g,))


def vabs(a):
    a = as_value(a)
    sign = np.sign(a.data)
    return _make_output(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(a):
    a = as_value(a)
    return _make_output(np.maximum(a.data, 0.0), (a,),
                        lambda g: (g * (a.data > 0.0),))


def vexp(a):
    a = as_value(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    return _make_output(data, (a,), lambda g: (g * data,))


def clamp(a, lo, hi):
    a = as_value(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make_output(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def matmul(a, b):
    """a @ b with 2-D b; a may carry up to two leading batch axes."""
    a, b = as_value(a), as_value(b)
    if b.data.ndim != 2:
        raise ShapeError(f"matmul weight must be 2-D, got shape {b.data.shape}")
    if a.data.ndim < 1 or a.data.shape[-1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner axes disagree: {a.data.shape} @ {b.data.shape}")
    data = a.data @ b.data

    def backfn(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.data.shape[-1])
        g2 = g.reshape(-1, b.data.shape[1])
        gb = a2.T @ g2
        return ga.reshape(a.data.shape), gb

    return _make_output(data, (a, b), backfn)


def concat(values, axis=-1):
    values = [as_value(v) for v in values]
    data = np.concatenate([v.data for v in values], axis=axis)
    sizes = [v.data.shape[axis] for v in values]
    offsets = np.cumsum([0] + sizes)

    def backfn(g):
        pieces = []
        for k in range(len(values)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offsets[k], offsets[k + 1])
            pieces.append(g[tuple(idx)])
        return tuple(pieces)

    return _make_output(data, tuple(values), backfn)


def reshape(a, shape):
    a = as_value(a)
    data = a.data.reshape(shape)
    orig = a.data.shape
    return _make_output(data, (a,), lambda g: (g.reshape(orig),))


def slice_rows(a, start, stop):
    """Rows start:stop of a (axis 0); backward zero-pads the complement."""
    a = as_value(a)
    data = a.data[start:stop].copy()

    def backfn(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        return (ga,)

    return _make_output(data, (a,), backfn)


def vsum(a, axis=None, keepdims=False):
    a = as_value(a)
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backfn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make_output(data, (a,), backfn)


def vmean(a, axis=None):
    a = as_value(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return div(vsum(a, axis=axis), float(n))


def gather_rows(a, idx, unique=False):
    """Select rows a[idx] along axis 0.

    Pass unique=True when no index repeats: the backward pass can then
    assign instead of accumulate, which is much cheaper.
    """
    a = as_value(a)
    idx = np.asarray(idx, dtype=np.intp)
    data = a.data[idx]

    def backfn(g):
        ga = np.zeros_like(a.data)
        if unique:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return _make_output(data, (a,), backfn)


def scatter_rows(rows, idx, n_rows):
    """Accumulate `rows` into a zero array of n_rows rows at positions idx.

    Duplicate indices sum in array order, which keeps floating-point
    accumulation deterministic.
    """
    rows = as_value(rows)
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((n_rows,) + rows.data.shape[1:], dtype=np.float64)
    np.add.at(data, idx, rows.data)
    return _make_output(data, (rows,), lambda g: (g[idx],))


def _segment_starts_to_counts(starts, total):
    starts = np.asarray(starts, dtype=np.intp)
    if starts.size == 0:
        return starts.copy()
    ends = np.empty_like(starts)
    ends[:-1] = starts[1:]
    ends[-1] = total
    return ends - starts


def _segment_reduce(data, starts, total, ufunc):
    """Reduce contiguous row segments; empty segments yield the identity row."""
    counts = _segment_starts_to_counts(starts, total)
    out = np.zeros((len(starts),) + data.shape[1:], dtype=np.float64)
    nonempty = counts > 0
    if np.any(nonempty):
        out[nonempty] = ufunc.reduceat(data, starts[nonempty], axis=0)
    return out, counts


def segment_sum(a, starts):
    """Sum contiguous row segments of a; segment k is rows starts[k]:starts[k+1]."""
    a = as_value(a)
    data, counts = _segment_reduce(a.data, starts, a.data.shape[0], np.add)

    def backfn(g):
        return (np.repeat(g, counts, axis=0),)

    return _make_output(data, (a,), backfn)


def repeat_rows(a, counts):
    """Repeat row k of a counts[k] times (inverse adjoint of segment_sum)."""
    a = as_value(a)
    counts = np.asarray(counts, dtype=np.intp)
    data = np.repeat(a.data, counts, axis=0)
    starts = np.concatenate(([0], np.cumsum(counts)[:-1])).astype(np.intp)

    def backfn(g):
        gg, _ = _segment_reduce(g, starts, g.shape[0], np.add)
        return (gg,)

    return _make_output(data, (a,), backfn)


def pair_messages(from_key, from_query, key_idx, query_idx, w_out, b_in, b_out):
    """Fused per-pair message computation for attention branches.

    Computes, for each pair p:

        r[p] = relu(from_key[key_idx[p]] + from_query[query_idx[p]] + b_in)
               @ w_out + b_out

    i.e. a two-layer MLP over gathered (key, query) position features
    whose first linear layer was already applied position-wise. One tape
    record covers the whole pipeline, so only the hidden activations and
    the result stay alive — at pair granularity that is the difference
    between fitting in memory and not.
    """
    from_key, from_query = as_value(from_key), as_value(from_query)
    w_out, b_in, b_out = as_value(w_out), as_value(b_in), as_value(b_out)
    key_idx = np.asarray(key_idx, dtype=np.intp)
    query_idx = np.asarray(query_idx, dtype=np.intp)
    pre = from_key.data[key_idx]
    pre += from_query.data[query_idx]
    pre += b_in.data
    hid = np.maximum(pre, 0.0, out=pre)
    data = hid @ w_out.data
    data += b_out.data

    def backfn(g):
        g_b_out = g.sum(axis=0)
        g_w_out = hid.T @ g
        g_hid = g @ w_out.data.T
        g_hid *= hid > 0.0
        g_b_in = g_hid.sum(axis=0)
        g_fk = np.zeros_like(from_key.data)
        np.add.at(g_fk, key_idx, g_hid)
        g_fq = np.zeros_like(from_query.data)
        np.add.at(g_fq, query_idx, g_hid)
        return g_fk, g_fq, g_w_out, g_b_in, g_b_out

    return _make_output(data, (from_key, from_query, w_out, b_in, b_out), backfn)


def segment_weighted_sum(alpha, rows, starts):
    """Per-segment sum of alpha * rows without keeping the product alive.

    alpha is a (P, 1) column, rows is (P, d); segment k covers
    starts[k]:starts[k+1]. Equivalent to segment_sum(mul(alpha, rows)).
    """
    alpha, rows = as_value(alpha), as_value(rows)
    counts = _segment_starts_to_counts(starts, rows.data.shape[0])
    data, _ = _segment_reduce(alpha.data * rows.data, starts,
                              rows.data.shape[0], np.add)

    def backfn(g):
        g_rep = np.repeat(g, counts, axis=0)
        g_alpha = np.sum(g_rep * rows.data, axis=-1, keepdims=True)
        g_rep *= alpha.data
        return g_alpha, g_rep

    return _make_output(data, (alpha, rows), backfn)


def segment_max_raw(data, starts):
    """Plain-array per-segment max (used detached inside segment_softmax)."""
    out, _ = _segment_reduce(np.asarray(data, dtype=np.float64), starts,
                             np.asarray(data).shape[0], np.maximum)
    return out


def softmax_stable(a, axis=-1):
    """Softmax along `axis`, computed with max-subtraction.

    Shift invariant: adding a constant along the axis leaves the output
    unchanged up to rounding. Raises EmptySetError on a zero-length axis.
    """
    a = as_value(a)
    if a.data.shape[axis] == 0:
        raise EmptySetError("softmax over an empty axis")
    m = np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def backfn(g):
        dot = np.sum(g * y, axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make_output(y, (a,), backfn)


# Logits further than this below their segment max contribute < 1e-26 of
# the mass; clamping there blocks exp underflow without affecting results.
LOGIT_SPAN = 60.0


def segment_softmax(logits, starts):
    """Softmax within each contiguous segment of a (P, 1) logit column.

    The per-segment max is subtracted as a constant (its gradient cancels
    by shift invariance), the shifted logits are clamped to [-LOGIT_SPAN,
    LOGIT_SPAN], and the result is normalized per segment. Empty segments
    simply contribute no rows.
    """
    logits = as_value(logits)
    total = logits.data.shape[0]
    counts = _segment_starts_to_counts(starts, total)
    m = segment_max_raw(logits.data, starts)
    shifted = sub(logits, np.repeat(m, counts, axis=0))
    e = vexp(clamp(shifted, -LOGIT_SPAN, LOGIT_SPAN))
    denom = segment_sum(e, starts)
    return div(e, repeat_rows(denom, counts))


def backward(root: Value):
    """Accumulate d(root)/d(leaf) into .grad of every requires-grad leaf.

    root must be a scalar recorded on an intact tape. Returns a dict
    mapping each touched requires-grad leaf Value to its gradient array.
    A second backward on the same tape raises TapeError.
    """
    tape = root.tape
    if tape is None:
        raise TapeError("root was not recorded on any tape")
    if tape.consumed:
        raise TapeError("tape already consumed; rebuild the forward pass")
    if root.data.size != 1:
        raise TapeError(f"backward root must be scalar, got shape {root.data.shape}")
    tape.consumed = True

    root.grad = np.ones_like(root.data)
    leaf_grads = {}
    records = tape.records
    for k in range(len(records) - 1, -1, -1):
        out, inputs, backfn = records[k]
        records[k] = None  # free the record (and its arrays) once consumed
        if out.grad is None:
            continue
        out_grad = out.grad
        grads = backfn(out_grad)
        out.grad = None
        # Gradients are accumulated in place, so each input must own its
        # array: fresh backfn outputs are adopted as-is; the output
        # gradient's storage may be adopted by at most one input, and
        # any other aliasing result is copied.
        out_grad_claimed = False
        for inp, g in zip(inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                if g is out_grad or g.base is out_grad:
                    if out_grad_claimed:
                        g = np.array(g, copy=True)
                    out_grad_claimed = True
                    inp.grad = g
                elif g.base is None:
                    inp.grad = g
                else:
                    inp.grad = np.array(g, copy=True)
            else:
                inp.grad += g
            if inp.tape is None:
                leaf_grads[inp] = inp.grad
    return leaf_grads
