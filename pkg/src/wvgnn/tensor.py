"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations only record onto a tape while one is active (``with Tape() as tape``)
and at least one input is tracked, so evaluation code runs on the same
functions without bookkeeping.

Complex quantities are carried in the real block form ``[[Re, -Im], [Im, Re]]``;
see :func:`complex_to_real_embedding`.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg.lapack as lapack

from .exceptions import DecompositionError, NonFiniteError, ShapeError, SingularMatrixError

_ACTIVE = []


class Tensor:
    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def mT(self):
        return swap_last(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    ``backward`` replays the records in exact reverse order; an output's adjoint
    is complete by the time its record is reached because every consumer was
    recorded after it.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def gradient(self, loss, wrt):
        """Adjoints of the scalar ``loss`` with respect to each tensor in ``wrt``."""
        loss = as_tensor(loss)
        if loss.data.size != 1:
            raise ShapeError("loss", "a scalar", loss.shape)
        adjoint = {id(loss): np.ones_like(loss.data)}
        for out, inputs, vjp in reversed(self.records):
            g = adjoint.pop(id(out), None)
            if g is None:
                continue
            wanted = [isinstance(x, Tensor) and x.tracked for x in inputs]
            for x, gx, need in zip(inputs, vjp(g), wanted):
                if not need or gx is None:
                    continue
                key = id(x)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gx
                else:
                    adjoint[key] = gx
        return [adjoint.get(id(w), np.zeros_like(w.data)) for w in wrt]

    def backward(self, loss, params):
        for p, g in zip(params, self.gradient(loss, params)):
            p.grad = g


def _record(value, inputs, vjp):
    out = Tensor(value)
    if _ACTIVE and any(isinstance(x, Tensor) and x.tracked for x in inputs):
        out.tracked = True
        _ACTIVE[-1].records.append((out, inputs, vjp))
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out, (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    a = as_tensor(a)
    x = a.data
    return _record(x ** exponent, (a,), lambda g: (g * exponent * x ** (exponent - 1),))


def square(a):
    a = as_tensor(a)
    x = a.data
    return _record(x * x, (a,), lambda g: (2.0 * g * x,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (0.5 * g / out,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def clamp_min(a, floor=0.0):
    """max(a, floor); the subgradient at the kink is zero."""
    a = as_tensor(a)
    keep = a.data > floor
    return _record(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- reductions / shape

def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    inverse = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a):
    a = as_tensor(a)
    return _record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def take(a, index):
    """``a[index]`` for basic or integer-array indexing; repeated indices accumulate."""
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), vjp)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=axis)),
    )


def broadcast_to(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _record(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, old),))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands", "ndim >= 2", (a.ndim, b.ndim))
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _record(ad @ bd, (a, b), vjp)


def _cholesky(sym):
    """Batched lower Cholesky factor; pinpoints the failing leading minor."""
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        flat = sym.reshape((-1,) + sym.shape[-2:])
        for b, m in enumerate(flat):
            _, info = lapack.dpotrf(m, lower=1, clean=1)
            if info > 0:
                raise DecompositionError(info - 1, b if flat.shape[0] > 1 else None) from None
        raise


def logdet_psd(a):
    """Natural-log determinant of symmetric positive definite matrices (batched).

    The input is symmetrised before the Cholesky factorisation so the result is
    a function of every entry; for symmetric input the gradient is ``inv(a).T``.
    """
    a = as_tensor(a)
    sym = 0.5 * (a.data + np.swapaxes(a.data, -1, -2))
    chol = _cholesky(sym)
    value = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(-1)

    def vjp(g):
        inv = np.linalg.inv(sym)
        return (np.asarray(g)[..., None, None] * np.swapaxes(inv, -1, -2),)

    return _record(value, (a,), vjp)


def matinv(a):
    """Inverse via pivoted LU (batched); d(A^-1) = -A^-1 dA A^-1."""
    a = as_tensor(a)
    try:
        inv = np.linalg.inv(a.data)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(float(np.max(np.linalg.cond(a.data)))) from None
    if not np.all(np.isfinite(inv)):
        raise SingularMatrixError(float(np.max(np.linalg.cond(a.data))))
    inv_t = np.swapaxes(inv, -1, -2)
    return _record(inv, (a,), lambda g: (-(inv_t @ g @ inv_t),))


def segment_max(values, dst, n_segments):
    """Elementwise MAX of ``values[:, e]`` grouped by destination ``dst[e]``.

    ``values`` has shape (batch, edges, features) with edges sorted by ``dst``.
    Empty segments yield zeros. The gradient goes to the first edge (lowest
    index) attaining the maximum.
    """
    values = as_tensor(values)
    v = values.data
    dst = np.asarray(dst)
    counts = np.bincount(dst, minlength=n_segments)
    if len(dst) and np.any(np.diff(dst) < 0):
        raise ValueError("edges must be sorted by destination")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    nonempty = counts > 0
    out = np.zeros((v.shape[0], n_segments, v.shape[2]))
    if not nonempty.any():
        return _record(out, (values,), lambda g: (np.zeros_like(v),))
    seg_starts = starts[nonempty]
    peak = np.maximum.reduceat(v, seg_starts, axis=1)
    out[:, nonempty] = peak
    hit = v == out[:, dst]
    pos = np.where(hit, np.arange(len(dst))[None, :, None], len(dst))
    first = np.minimum.reduceat(pos, seg_starts, axis=1)

    def vjp(g):
        gv = np.zeros_like(v)
        np.put_along_axis(gv, first, g[:, nonempty], axis=1)
        return (gv,)

    return _record(out, (values,), vjp)


# ---------------------------------------------------------------- complex helpers

def complex_to_real_embedding(m):
    """Real block form [[Re, -Im], [Im, Re]] of a (batched) complex matrix."""
    m = np.asarray(m)
    if m.ndim < 2:
        raise ShapeError("complex matrix", "ndim >= 2", m.ndim)
    re, im = m.real.astype(np.float64), m.imag.astype(np.float64)
    top = np.concatenate([re, -im], axis=-1)
    bottom = np.concatenate([im, re], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def real_to_complex(e):
    """Inverse of :func:`complex_to_real_embedding` (reads the left block column)."""
    e = _data(e)
    n, m = e.shape[-2] // 2, e.shape[-1] // 2
    return e[..., :n, :m] + 1j * e[..., n:, :m]


def embed(re, im):
    """Differentiable block embedding from real and imaginary part tensors."""
    return concat([concat([re, -as_tensor(im)], -1), concat([im, re], -1)], -2)


def is_hermitian(m, tol=1e-12):
    m = np.asarray(m)
    return bool(np.max(np.abs(m - np.swapaxes(m.conj(), -1, -2)), initial=0.0) <= tol)


def hermitian_solve(a, b):
    """Solve ``a x = b`` for Hermitian positive definite ``a`` by Cholesky.

    Raises :class:`DecompositionError` naming the first non-positive pivot.
    """
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("hermitian_solve matrix", "square 2-D", a.shape)
    vec = b.ndim == 1
    rhs = b[:, None] if vec else b
    chol, info = lapack.zpotrf(a, lower=1, clean=1)
    if info > 0:
        raise DecompositionError(info - 1)
    x, info = lapack.zpotrs(chol, rhs, lower=1)
    if info != 0:
        raise np.linalg.LinAlgError(f"zpotrs failed with info={info}")
    return x[:, 0] if vec else x


# ---------------------------------------------------------------- checking

def gradcheck(fn, x, step=1e-4, entries=None, scale=None):
    """Worst element-wise relative error between tape and finite-difference gradients.

    ``fn`` maps a Tensor to a scalar Tensor. Reference derivatives use the
    fourth-order central stencil (-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h.
    Element i contributes ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, floor)`` with
    ``floor = 1e-6 * max|g|`` (at least 1e-12): entries that small are below the
    stencil's rounding noise and are compared against the floor instead.
    ``entries`` restricts the comparison to those flat indices of ``x``; ``scale``
    overrides max|g| in the floor (use the largest gradient of the whole
    parameter set when checking one block of it).
    """
    x0 = np.array(_data(x), dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        loss = fn(xt)
    (g_tape,) = tape.gradient(loss, [xt])
    flat = x0.reshape(-1)
    entries = np.arange(flat.size) if entries is None else np.asarray(entries)
    g_fd = np.zeros(len(entries))
    for n, i in enumerate(entries):
        vals = []
        for offset in (2.0, 1.0, -1.0, -2.0):
            xp = flat.copy()
            xp[i] += offset * step
            f = float(_data(fn(Tensor(xp.reshape(x0.shape)))))
            if not np.isfinite(f):
                raise NonFiniteError(f"non-finite loss at perturbed element {i}")
            vals.append(f)
        g_fd[n] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * step)
    g_tape = g_tape.reshape(-1)[entries]
    big = np.maximum(np.abs(g_tape), np.abs(g_fd))
    if scale is None:
        scale = float(np.max(big, initial=0.0))
    floor = max(1e-6 * scale, 1e-12)
    return float(np.max(np.abs(g_tape - g_fd) / np.maximum(big, floor), initial=0.0))
