"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tape` records every primitive applied to tensors that require gradients;
replaying the record in reverse computes vector-Jacobian products.  Ops run
eagerly on numpy and only append a closure to the active tape, so the same
functions double as a plain (gradient-free) numeric layer when no tape is
open, which is what decoding uses.

Only the primitives the segmental decoder needs are provided: elementwise
arithmetic, matmul, reductions, log-sum-exp, gather/scatter-style indexing,
tanh/relu/sigmoid, dropout and a single LSTM cell.  No broadcasting rules
beyond numpy's, no higher-order derivatives.
"""

import threading

import numpy as np

_state = threading.local()


def active_tape():
    """The tape currently recording on this thread, or None."""
    return getattr(_state, "tape", None)


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Forward execution order is a topological order of the op DAG, so
    replaying the list backwards visits each op after all its consumers.
    A tape is single-use: `backward` raises if called twice.
    """

    def __init__(self):
        self._ops = []
        self._consumed = False

    def __enter__(self):
        if active_tape() is not None:
            raise RuntimeError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _state.tape = None
        return False

    def record(self, backward_fn):
        self._ops.append(backward_fn)

    def backward(self, root, seed=1.0):
        """Accumulate d(root)/d(leaf) into every participating leaf's grad.

        `root` must be a scalar tensor produced under this tape.  `seed`
        scales the whole gradient (handy for mean-over-batch losses).
        """
        if self._consumed:
            raise RuntimeError("tape already replayed; run a new forward pass")
        self._consumed = True
        if root.values.size != 1:
            raise ValueError("backward root must be a scalar tensor")
        root._accumulate(np.full_like(root.values, seed))
        for fn in reversed(self._ops):
            fn()


class Tensor:
    """Dense array plus a gradient accumulator.

    `grad` reads as zeros until something has actually flowed into the
    tensor, so non-participating tensors report an exact zero gradient.
    """

    __slots__ = ("values", "requires_grad", "_grad", "name")

    def __init__(self, values, requires_grad=False, name=None):
        v = np.asarray(values)
        if v.dtype.kind in "iub":
            v = v.astype(np.float64)
        self.values = v
        self.requires_grad = requires_grad
        self._grad = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.values)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.values.reshape(-1)[0])

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        self._grad += g

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # operator sugar; constants may be plain floats/arrays
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(values, name=None):
    return Tensor(values, requires_grad=True, name=name)


def _result(values, inputs, backward_builder):
    """Wrap op output; record backward only if a tape is live and needed."""
    out = Tensor(values)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(backward_builder(out))
    return out


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b):
    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(_unbroadcast(out._grad, a.shape).astype(a.dtype))
            if b.requires_grad:
                b._accumulate(_unbroadcast(out._grad, b.shape).astype(b.dtype))
        return bwd

    return _result(a.values + b.values, (a, b), build)


def sub(a, b):
    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(_unbroadcast(out._grad, a.shape).astype(a.dtype))
            if b.requires_grad:
                b._accumulate(-_unbroadcast(out._grad, b.shape).astype(b.dtype))
        return bwd

    return _result(a.values - b.values, (a, b), build)


def neg(a):
    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(-out._grad)
        return bwd

    return _result(-a.values, (a,), build)


def mul(a, b):
    av, bv = a.values, b.values

    def build(out):
        def bwd():
            if out._grad is None:
                return
            g = out._grad
            if a.requires_grad:
                a._accumulate(_unbroadcast(g * bv, a.shape).astype(a.dtype))
            if b.requires_grad:
                b._accumulate(_unbroadcast(g * av, b.shape).astype(b.dtype))
        return bwd

    return _result(av * bv, (a, b), build)


def scale(a, c):
    """Multiply by a python constant (no gradient for the constant)."""
    c = float(c)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(c * out._grad)
        return bwd

    return _result(a.values * c, (a,), build)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values

    def build(out):
        def bwd():
            if out._grad is None:
                return
            g = out._grad
            if a.requires_grad:
                a._accumulate((g @ bv.T).astype(a.dtype))
            if b.requires_grad:
                b._accumulate((av.T @ g).astype(b.dtype))
        return bwd

    return _result(av @ bv, (a, b), build)


def transpose(a):
    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(out._grad.T)
        return bwd

    return _result(a.values.T, (a,), build)


def reshape(a, shape):
    old = a.shape

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(out._grad.reshape(old))
        return bwd

    return _result(a.values.reshape(shape), (a,), build)


def concat(tensors, axis=0):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def build(out):
        def bwd():
            if out._grad is None:
                return
            pieces = np.split(out._grad, splits, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t._accumulate(g.astype(t.dtype))
        return bwd

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tensors, build)


def stack(tensors, axis=0):
    tensors = list(tensors)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            for i, t in enumerate(tensors):
                if t.requires_grad:
                    t._accumulate(np.take(out._grad, i, axis=axis).astype(t.dtype))
        return bwd

    return _result(np.stack([t.values for t in tensors], axis=axis), tensors, build)


def split(a, n, axis=-1):
    """Split into `n` equal parts along `axis`."""
    vals = np.split(a.values, n, axis=axis)
    outs = []
    tape = active_tape()
    for i, v in enumerate(vals):
        out = Tensor(v)
        if tape is not None and a.requires_grad:
            out.requires_grad = True

            def build(out=out, i=i):
                def bwd():
                    if out._grad is None:
                        return
                    g = np.zeros_like(a.values)
                    idx = [slice(None)] * a.ndim
                    step = a.shape[axis] // n
                    idx[axis] = slice(i * step, (i + 1) * step)
                    g[tuple(idx)] = out._grad
                    a._accumulate(g)
                return bwd

            tape.record(build())
        outs.append(out)
    return outs


def index_select(a, idx, axis=0):
    """Row/slice gather; backward scatter-adds into the source."""
    idx = np.asarray(idx, dtype=np.intp)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                g = np.zeros_like(a.values)
                if axis == 0:
                    np.add.at(g, idx, out._grad)
                else:
                    gi = [slice(None)] * a.ndim
                    gi[axis] = idx
                    np.add.at(g, tuple(gi), out._grad)
                a._accumulate(g)
        return bwd

    return _result(np.take(a.values, idx, axis=axis), (a,), build)


def embedding(table, ids):
    """Lookup rows of an embedding table (alias of index_select on axis 0)."""
    return index_select(table, ids, axis=0)


def take_column(a, col):
    """Select one column of a 2-d tensor, returning a 1-d tensor."""
    col = int(col)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                g = np.zeros_like(a.values)
                g[:, col] = out._grad
                a._accumulate(g)
        return bwd

    return _result(a.values[:, col].copy(), (a,), build)


# ---------------------------------------------------------------------------
# reductions


def tensor_sum(a, axis=None, keepdims=False):
    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                g = out._grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                a._accumulate(np.broadcast_to(g, a.shape).astype(a.dtype))
        return bwd

    return _result(a.values.sum(axis=axis, keepdims=keepdims), (a,), build)


def cumsum(a, axis):
    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                g = np.flip(np.cumsum(np.flip(out._grad, axis=axis), axis=axis), axis=axis)
                a._accumulate(g)
        return bwd

    return _result(np.cumsum(a.values, axis=axis), (a,), build)


def tensor_max(a, axis, keepdims=False):
    """Max-reduce along one axis; ties route gradient to the first argmax."""
    arg = np.argmax(a.values, axis=axis)
    out_vals = np.max(a.values, axis=axis, keepdims=keepdims)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                g = out._grad if keepdims else np.expand_dims(out._grad, axis)
                full = np.zeros_like(a.values)
                np.put_along_axis(full, np.expand_dims(arg, axis), g, axis=axis)
                a._accumulate(full)
        return bwd

    return _result(out_vals, (a,), build)


def _lse_values(v, axis, keepdims):
    m = np.max(v, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def logsumexp(a, axis=None, keepdims=False):
    """Max-shifted log-sum-exp; an all -inf slice yields -inf with zero grad."""
    if a.values.size == 0:
        raise ValueError("logsumexp of an empty tensor")
    if axis is None and a.ndim > 1:
        return logsumexp(reshape(a, (-1,)), axis=0, keepdims=keepdims)
    ax = 0 if axis is None else axis
    out_vals = _lse_values(a.values, ax, keepdims)
    av = a.values

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                o = out_vals if keepdims else np.expand_dims(out_vals, ax)
                g = out._grad if keepdims else np.expand_dims(out._grad, ax)
                safe = np.where(np.isfinite(o), o, 0.0)
                w = np.where(np.isfinite(o), np.exp(av - safe), 0.0)
                a._accumulate((w * g).astype(av.dtype))
        return bwd

    return _result(out_vals, (a,), build)


def log_sum_exp(a):
    """Scalar log-sum-exp of a vector; gradient is softmax of the input."""
    if a.values.size == 0:
        raise ValueError("log_sum_exp of an empty tensor")
    return logsumexp(a, axis=None)


def gather_lse(a, idx):
    """Per-row log-sum-exp over selected columns of a 2-d tensor.

    `idx` is (B, M) column indices into `a` of shape (B, S); rows of the
    result are logsumexp(a[b, idx[b]]).  Padding convention: point unused
    slots at a column holding -inf, which contributes nothing and gets a
    zero gradient.
    """
    idx = np.asarray(idx, dtype=np.intp)
    picked = np.take_along_axis(a.values, idx, axis=1)
    out_vals = _lse_values(picked, 1, False)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                o = out_vals[:, None]
                safe = np.where(np.isfinite(o), o, 0.0)
                w = np.where(np.isfinite(o), np.exp(picked - safe), 0.0)
                g = np.zeros_like(a.values)
                rows = np.arange(idx.shape[0])[:, None]
                np.add.at(g, (rows, idx), w * out._grad[:, None])
                a._accumulate(g)
        return bwd

    return _result(out_vals, (a,), build)


def log_softmax(a, axis=-1):
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis=-1):
    return exp(log_softmax(a, axis=axis))


# ---------------------------------------------------------------------------
# nonlinearities


def exp(a):
    ev = np.exp(a.values)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(out._grad * ev)
        return bwd

    return _result(ev, (a,), build)


def tanh(a):
    tv = np.tanh(a.values)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(out._grad * (1.0 - tv * tv))
        return bwd

    return _result(tv, (a,), build)


def relu(a):
    mask = a.values > 0

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(out._grad * mask)
        return bwd

    return _result(np.where(mask, a.values, 0.0), (a,), build)


def sigmoid(a):
    sv = 1.0 / (1.0 + np.exp(-a.values))

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(out._grad * sv * (1.0 - sv))
        return bwd

    return _result(sv, (a,), build)


def cast(a, dtype):
    dtype = np.dtype(dtype)

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate(out._grad.astype(a.dtype))
        return bwd

    return _result(a.values.astype(dtype), (a,), build)


def dropout(a, rate, training, rng):
    """Inverted dropout: mask then rescale by 1/(1-rate); identity in eval."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep) / keep

    def build(out):
        def bwd():
            if out._grad is None:
                return
            if a.requires_grad:
                a._accumulate((out._grad * mask).astype(a.dtype))
        return bwd

    return _result(a.values * mask, (a,), build)


# ---------------------------------------------------------------------------
# recurrent cell


def lstm_cell(x, h, c, w_x, w_h, b):
    """One LSTM step.  Gate order along the 4d axis is (i, f, g, o).

    x: (B, din), h/c: (B, d), w_x: (din, 4d), w_h: (d, 4d), b: (4d,).
    Returns (h', c').
    """
    if x.shape[1] != w_x.shape[0] or h.shape[1] != w_h.shape[0]:
        raise ValueError(
            f"lstm_cell dimension mismatch: x {x.shape}, h {h.shape}, "
            f"w_x {w_x.shape}, w_h {w_h.shape}"
        )
    z = add(add(matmul(x, w_x), matmul(h, w_h)), b)
    zi, zf, zg, zo = split(z, 4, axis=1)
    c_new = add(mul(sigmoid(zf), c), mul(sigmoid(zi), tanh(zg)))
    h_new = mul(sigmoid(zo), tanh(c_new))
    return h_new, c_new


def global_norm(grads):
    """L2 norm over a list of gradient arrays."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return float(np.sqrt(total))
