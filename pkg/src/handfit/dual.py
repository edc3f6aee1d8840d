"""Forward-mode automatic differentiation over numpy arrays.

A Jet bundles a primal array ``val`` of shape S with a tangent array ``tan``
of shape S + (K,), where K is the number of seed variables.  Slot k of the
trailing axis holds d(val)/d(x_k).  All arithmetic propagates the whole
tangent block at once, so one evaluation of a function built from these ops
yields the value and its full K-column Jacobian row.

Plain ndarrays (or python scalars) mix freely with Jets and are treated as
constants.  The module-level helpers (sin, exp, matmul, ...) dispatch on
type, so numeric code written against them runs unchanged on primal inputs.

Non-smooth primitives (hinge, clip01, vmax) gate tangents by the primal
branch, i.e. they propagate the one-sided derivative of the active piece.
"""

from __future__ import annotations

import numpy as np


def _astuple(idx):
    return idx if isinstance(idx, tuple) else (idx,)


class Jet:
    __slots__ = ("val", "tan")
    # keep numpy from consuming us in ndarray.__mul__ etc.
    __array_ufunc__ = None

    def __init__(self, val, tan):
        self.val = val
        self.tan = tan

    # -- construction ------------------------------------------------------

    @classmethod
    def seed(cls, values, offsets, width):
        """Make a Jet whose entry i is an independent variable at tangent
        slot offsets[i].  ``offsets`` must match ``values`` in shape."""
        val = np.asarray(values, dtype=float)
        off = np.asarray(offsets)
        tan = np.zeros(val.shape + (width,))
        for i, o in zip(np.ndindex(val.shape), off.ravel()):
            tan[i + (int(o),)] = 1.0
        return cls(val, tan)

    @classmethod
    def const(cls, values, width):
        val = np.asarray(values, dtype=float)
        return cls(val, np.zeros(val.shape + (width,)))

    # -- shape bookkeeping ---------------------------------------------------

    @property
    def shape(self):
        return self.val.shape

    @property
    def width(self):
        return self.tan.shape[-1]

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Jet(self.val.reshape(shape), self.tan.reshape(shape + (self.width,)))

    def ravel(self):
        return self.reshape((-1,))

    def __getitem__(self, idx):
        t = _astuple(idx)
        return Jet(self.val[t], self.tan[t + (slice(None),)])

    def __len__(self):
        return len(self.val)

    # -- arithmetic ----------------------------------------------------------

    def __neg__(self):
        return Jet(-self.val, -self.tan)

    def __add__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val + other.val, self.tan + other.tan)
        other = np.asarray(other, dtype=float)
        # broadcasting a constant can enlarge the primal shape; the tangent
        # block has to follow it
        val = self.val + other
        if val.shape == self.val.shape:
            return Jet(val, self.tan)
        return Jet(val, np.broadcast_to(self.tan, val.shape + (self.width,)).copy())

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other if isinstance(other, Jet) else -np.asarray(other, dtype=float))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Jet):
            return Jet(self.val * other.val,
                       self.val[..., None] * other.tan + self.tan * other.val[..., None])
        other = np.asarray(other, dtype=float)
        return Jet(self.val * other, self.tan * other[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            inv = 1.0 / other.val
            val = self.val * inv
            tan = (self.tan - val[..., None] * other.tan) * inv[..., None]
            return Jet(val, tan)
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        other = np.asarray(other, dtype=float)
        inv = 1.0 / self.val
        val = other * inv
        return Jet(val, -val[..., None] * self.tan * inv[..., None])

    def __pow__(self, n):
        if n != 2:
            raise NotImplementedError("only squaring is supported")
        return self * self

    def sum(self, axis=None):
        if axis is None:
            return Jet(self.val.sum(), self.tan.reshape(-1, self.width).sum(axis=0))
        axis = axis % self.val.ndim
        return Jet(self.val.sum(axis=axis), self.tan.sum(axis=axis))


def is_jet(x):
    return isinstance(x, Jet)


def value(x):
    return x.val if isinstance(x, Jet) else x


def _unary(x, f, df):
    if isinstance(x, Jet):
        v = f(x.val)
        return Jet(v, x.tan * df(x.val, v)[..., None])
    return f(x)


def sin(x):
    return _unary(x, np.sin, lambda v, fv: np.cos(v))


def cos(x):
    return _unary(x, np.cos, lambda v, fv: -np.sin(v))


def exp(x):
    return _unary(x, np.exp, lambda v, fv: fv)


def log(x):
    return _unary(x, np.log, lambda v, fv: 1.0 / v)


def sqrt(x):
    return _unary(x, np.sqrt, lambda v, fv: 0.5 / fv)


def hinge(x):
    """max(x, 0) with the tangent gated to the active side (zero at the kink)."""
    if isinstance(x, Jet):
        gate = x.val > 0.0
        return Jet(np.where(gate, x.val, 0.0), x.tan * gate[..., None])
    return np.maximum(x, 0.0)


def vmax(a, b):
    """Elementwise max of two Jets/arrays; ties take the first argument's tangent."""
    if not isinstance(a, Jet) and not isinstance(b, Jet):
        return np.maximum(a, b)
    w = a.width if isinstance(a, Jet) else b.width
    a = a if isinstance(a, Jet) else Jet.const(np.broadcast_to(a, value(b).shape), w)
    b = b if isinstance(b, Jet) else Jet.const(np.broadcast_to(b, value(a).shape), w)
    pick = a.val >= b.val
    return Jet(np.where(pick, a.val, b.val), np.where(pick[..., None], a.tan, b.tan))


def clip01(x):
    """clip(x, 0, 1); tangent passes only strictly inside the interval."""
    if isinstance(x, Jet):
        gate = (x.val > 0.0) & (x.val < 1.0)
        return Jet(np.clip(x.val, 0.0, 1.0), x.tan * gate[..., None])
    return np.clip(x, 0.0, 1.0)


def where(cond, a, b):
    if isinstance(a, Jet) or isinstance(b, Jet):
        w = a.width if isinstance(a, Jet) else b.width
        a = a if isinstance(a, Jet) else Jet.const(a, w)
        b = b if isinstance(b, Jet) else Jet.const(b, w)
        va, vb = np.broadcast_arrays(a.val, b.val)
        return Jet(np.where(cond, va, vb),
                   np.where(np.asarray(cond)[..., None], a.tan, b.tan))
    return np.where(cond, a, b)


def stack(parts, axis=0):
    if any(isinstance(p, Jet) for p in parts):
        w = next(p.width for p in parts if isinstance(p, Jet))
        parts = [p if isinstance(p, Jet) else Jet.const(p, w) for p in parts]
        ax = axis % (parts[0].val.ndim + 1)
        return Jet(np.stack([p.val for p in parts], axis=ax),
                   np.stack([p.tan for p in parts], axis=ax))
    return np.stack(parts, axis=axis)


def concatenate(parts, axis=0):
    if any(isinstance(p, Jet) for p in parts):
        w = next(p.width for p in parts if isinstance(p, Jet))
        parts = [p if isinstance(p, Jet) else Jet.const(p, w) for p in parts]
        ax = axis % parts[0].val.ndim
        return Jet(np.concatenate([p.val for p in parts], axis=ax),
                   np.concatenate([p.tan for p in parts], axis=ax))
    return np.concatenate(parts, axis=axis)


def _mm_val_tan(a, bt):
    """(..., i, j) @ (..., j, k, t) -> (..., i, k, t).  Folding (k,t) into a
    single matrix axis lets one gemm cover the whole tangent block instead of
    a t-long loop of tiny products."""
    k, t = bt.shape[-2:]
    m = np.ascontiguousarray(bt).reshape(bt.shape[:-2] + (k * t,))
    out = a @ m
    return out.reshape(out.shape[:-1] + (k, t))


def _mm_tan_val(at, b):
    """(..., i, j, t) @ (..., j, k) -> (..., i, k, t), via the transpose of
    the folded form."""
    out = _mm_val_tan(np.swapaxes(b, -1, -2), np.swapaxes(at, -3, -2))
    return np.swapaxes(out, -3, -2)


def matmul(a, b):
    """Batched matrix product with ellipsis broadcasting, any Jet/const mix."""
    aj, bj = isinstance(a, Jet), isinstance(b, Jet)
    if not aj and not bj:
        return a @ b
    if aj and bj:
        val = a.val @ b.val
        tan = _mm_val_tan(a.val, b.tan) + _mm_tan_val(a.tan, b.val)
        return Jet(val, tan)
    if aj:
        return Jet(a.val @ b, _mm_tan_val(a.tan, b))
    return Jet(a @ b.val, _mm_val_tan(a, b.tan))


def matvec(a, b):
    """Batched matrix-vector product '...ij,...j->...i', any Jet/const mix."""
    if isinstance(a, Jet) or isinstance(b, Jet):
        col = b.reshape(b.shape + (1,)) if isinstance(b, Jet) else np.asarray(b)[..., None]
        return matmul(a, col)[..., 0]
    return np.einsum("...ij,...j->...i", a, b)


def mT(x):
    """Transpose the last two (matrix) axes."""
    if isinstance(x, Jet):
        return Jet(np.swapaxes(x.val, -1, -2), np.swapaxes(x.tan, -2, -3))
    return np.swapaxes(x, -1, -2)


def transpose(x, axes):
    """Permute primal axes; the tangent slot stays last."""
    if isinstance(x, Jet):
        return Jet(x.val.transpose(axes), x.tan.transpose(tuple(axes) + (x.val.ndim,)))
    return np.transpose(x, axes)


def const_dot(A, x, axes=1):
    """tensordot(A, x) where A is a constant; contraction may not touch the
    tangent axis, so ``axes`` must refer to leading axes of x."""
    if isinstance(x, Jet):
        return Jet(np.tensordot(A, x.val, axes=axes), np.tensordot(A, x.tan, axes=axes))
    return np.tensordot(A, x, axes=axes)


def sumsq(x, axis=None):
    return (x * x).sum(axis=axis) if isinstance(x, Jet) else np.sum(x * x, axis=axis)


def norm(x, axis=-1):
    if isinstance(x, Jet):
        ax = axis % x.val.ndim
        return sqrt(sumsq(x, axis=ax))
    return np.linalg.norm(x, axis=axis)
