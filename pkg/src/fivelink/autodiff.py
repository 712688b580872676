"""Vectorized forward-mode automatic differentiation.

A ``Dual`` carries an array of values together with a fixed-width block of
partial derivatives with respect to a set of seed directions.  ``val`` may
have any shape ``S``; ``der`` then has shape ``S + (width,)``, so a whole
batch of independent evaluation points can be pushed through the dynamics
at once.  Supported primitives: +, -, *, /, integer powers, sin, cos, sqrt,
the smoothed absolute value sqrt(x^2 + eps^2), linear solves, and a few
linear-algebra helpers.  Derivatives are exact (to roundoff) by the usual
sum/product/chain rules.

Only first-order forward mode is provided; there is no taping and no
reverse pass.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence

import numpy as np


class ADDomainError(ArithmeticError):
    """A primitive was evaluated where its derivative is undefined."""


class SingularMatrixError(np.linalg.LinAlgError):
    """Linear solve failed; carries a condition estimate of the value part."""

    def __init__(self, cond: float):
        self.cond = cond
        super().__init__(f"matrix is singular to working precision (cond ~ {cond:.3e})")


def _asfloat(x) -> np.ndarray:
    return np.asarray(x, dtype=float)


class Dual:
    """Array of dual scalars: ``val`` of shape S, ``der`` of shape S + (width,)."""

    __slots__ = ("val", "der")

    # numpy must defer to our reflected operators instead of broadcasting
    __array_ufunc__ = None

    def __init__(self, val, der):
        self.val = _asfloat(val)
        self.der = _asfloat(der)
        if self.der.shape[: self.der.ndim - 1] != self.val.shape:
            raise ValueError(
                f"der shape {self.der.shape} does not extend val shape {self.val.shape}"
            )

    @property
    def width(self) -> int:
        return self.der.shape[-1]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.val.shape

    def __repr__(self) -> str:
        return f"Dual(val={self.val!r}, width={self.width})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val + other.val, self.der + other.der)
        return Dual(self.val + _asfloat(other), _bcast_der(self.der, np.shape(other)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.val - other.val, self.der - other.der)
        return Dual(self.val - _asfloat(other), _bcast_der(self.der, np.shape(other)))

    def __rsub__(self, other):
        return Dual(_asfloat(other) - self.val, _bcast_der(-self.der, np.shape(other)))

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(
                self.val * other.val,
                self.der * other.val[..., None] + self.val[..., None] * other.der,
            )
        o = _asfloat(other)
        return Dual(self.val * o, self.der * o[..., None])

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            inv = 1.0 / other.val
            val = self.val * inv
            der = (self.der - val[..., None] * other.der) * inv[..., None]
            return Dual(val, der)
        o = _asfloat(other)
        return Dual(self.val / o, self.der / o[..., None])

    def __rtruediv__(self, other):
        o = _asfloat(other)
        val = o / self.val
        return Dual(val, -(val / self.val)[..., None] * self.der)

    def __pow__(self, n):
        if not isinstance(n, (int, np.integer)):
            raise TypeError("only integer powers are supported")
        val = self.val**n
        return Dual(val, (n * self.val ** (n - 1))[..., None] * self.der)

    def __neg__(self):
        return Dual(-self.val, -self.der)

    def __getitem__(self, key):
        if not isinstance(key, tuple):
            key = (key,)
        if any(k is Ellipsis for k in key):
            dkey = key + (slice(None),)
        else:
            dkey = key
        return Dual(self.val[key], self.der[dkey])

    # comparisons act on value parts, for branch decisions only
    def __lt__(self, other):
        return self.val < value(other)

    def __le__(self, other):
        return self.val <= value(other)

    def __gt__(self, other):
        return self.val > value(other)

    def __ge__(self, other):
        return self.val >= value(other)


def _bcast_der(der: np.ndarray, other_shape: tuple[int, ...]) -> np.ndarray:
    """Broadcast a derivative block against a plain operand's shape."""
    if other_shape == () or other_shape == der.shape[:-1]:
        return der
    out = np.broadcast_shapes(der.shape[:-1], other_shape)
    return np.broadcast_to(der, out + der.shape[-1:]).copy()


def value(x) -> np.ndarray:
    """The value part of ``x`` (identity on plain arrays)."""
    return x.val if isinstance(x, Dual) else _asfloat(x)


def partials(x, width: int | None = None) -> np.ndarray:
    """The derivative block of ``x``; zeros for a plain array of given width."""
    if isinstance(x, Dual):
        return x.der
    if width is None:
        raise ValueError("width required for plain input")
    v = _asfloat(x)
    return np.zeros(v.shape + (width,))


def lift(x, seed: Iterable[int] | None = None) -> Dual:
    """Seed a real vector as a Dual.

    ``seed`` lists the component indices that get their own derivative
    direction (in order); the default seeds every component, giving an
    identity derivative block.
    """
    v = _asfloat(x)
    if v.ndim != 1:
        raise ValueError("lift expects a 1-d vector")
    idx = list(range(v.size)) if seed is None else sorted(seed)
    if idx and (idx[0] < 0 or idx[-1] >= v.size):
        raise IndexError("seed index out of range")
    der = np.zeros((v.size, len(idx)))
    for col, i in enumerate(idx):
        der[i, col] = 1.0
    return Dual(v, der)


def seed_batch(x) -> Dual:
    """Seed the last axis of a batch of vectors with identity derivatives."""
    v = _asfloat(x)
    w = v.shape[-1]
    der = np.broadcast_to(np.eye(w), v.shape + (w,)).copy()
    return Dual(v, der)


def jacobian(f, x) -> np.ndarray:
    """Jacobian of a vector function at ``x`` by one forward sweep."""
    x = _asfloat(x)
    y = f(lift(x))
    if isinstance(y, Dual):
        if y.val.ndim == 0:
            return y.der.reshape(1, x.size)
        return y.der.reshape(y.val.size, x.size)
    return np.zeros((np.asarray(y).size, x.size))


def gradient(f, x) -> np.ndarray:
    """Gradient of a scalar function at ``x``."""
    x = _asfloat(x)
    y = f(lift(x))
    if isinstance(y, Dual):
        if y.val.size != 1:
            raise ValueError("gradient expects a scalar-valued function")
        return y.der.reshape(x.size)
    return np.zeros(x.size)


# -- elementwise primitives ---------------------------------------------------


def sin(x):
    if isinstance(x, Dual):
        return Dual(np.sin(x.val), np.cos(x.val)[..., None] * x.der)
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(np.cos(x.val), -np.sin(x.val)[..., None] * x.der)
    return np.cos(x)


def sqrt(x):
    if isinstance(x, Dual):
        if np.any(x.val <= 0.0):
            raise ADDomainError("sqrt differentiated at a non-positive value")
        val = np.sqrt(x.val)
        return Dual(val, (0.5 / val)[..., None] * x.der)
    return np.sqrt(x)


def smooth_abs(x, eps_sq: float):
    """sqrt(x^2 + eps^2): smooth everywhere, slope 0 at x = 0."""
    if isinstance(x, Dual):
        val = np.sqrt(x.val * x.val + eps_sq)
        return Dual(val, (x.val / val)[..., None] * x.der)
    return np.sqrt(x * x + eps_sq)


# -- linear algebra -----------------------------------------------------------


def _solve_val(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        raise SingularMatrixError(float(np.linalg.cond(a))) from None


def solve(a, b):
    """Solve a @ x = b where either operand may be a Dual.

    ``b`` may be a vector (ndim one less than ``a``) or a matrix.  The
    derivative part satisfies a dx = db - da @ x.
    """
    av = value(a)
    bv = value(b)
    vec = bv.ndim == av.ndim - 1
    # numpy 2 treats any b.ndim >= 2 as a matrix stack; add the vector axis
    xv = _solve_val(av, bv[..., None])[..., 0] if vec else _solve_val(av, bv)
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return xv
    w = a.width if isinstance(a, Dual) else b.width
    if vec:
        rhs = partials(b, w).copy()
        if isinstance(a, Dual):
            rhs -= np.einsum("...ijw,...j->...iw", a.der, xv, optimize=True)
        return Dual(xv, _solve_val(av, rhs))
    rhs = partials(b, w).copy()
    if isinstance(a, Dual):
        rhs -= np.einsum("...ijw,...jk->...ikw", a.der, xv, optimize=True)
    # collapse the (k, w) trailing axes into one multi-rhs block for the solve
    k = xv.shape[-1]
    n = av.shape[-1]
    der = _solve_val(av, rhs.reshape(rhs.shape[:-3] + (n, k * w)))
    return Dual(xv, der.reshape(xv.shape + (w,)))


def matvec(a, x):
    """a @ x for a matrix and a vector, either may be Dual."""
    if not isinstance(a, Dual) and not isinstance(x, Dual):
        return np.einsum("...ij,...j->...i", a, x, optimize=True)
    av, xv = value(a), value(x)
    val = np.einsum("...ij,...j->...i", av, xv, optimize=True)
    w = a.width if isinstance(a, Dual) else x.width
    der = np.zeros(val.shape + (w,))
    if isinstance(a, Dual):
        der = der + np.einsum("...ijw,...j->...iw", a.der, xv, optimize=True)
    if isinstance(x, Dual):
        der = der + np.einsum("...ij,...jw->...iw", av, x.der, optimize=True)
    return Dual(val, der)


def matmat(a, b):
    """a @ b for matrices, either may be Dual."""
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return np.einsum("...ij,...jk->...ik", a, b, optimize=True)
    av, bv = value(a), value(b)
    val = np.einsum("...ij,...jk->...ik", av, bv, optimize=True)
    w = a.width if isinstance(a, Dual) else b.width
    der = np.zeros(val.shape + (w,))
    if isinstance(a, Dual):
        der = der + np.einsum("...ijw,...jk->...ikw", a.der, bv, optimize=True)
    if isinstance(b, Dual):
        der = der + np.einsum("...ij,...jkw->...ikw", av, b.der, optimize=True)
    return Dual(val, der)


def const_einsum(subscripts: str, x, *consts):
    """einsum with one possibly-Dual operand (written first in subscripts)."""
    if not isinstance(x, Dual):
        return np.einsum(subscripts, x, *consts, optimize=True)
    ins, out = subscripts.split("->")
    terms = ins.split(",")
    dsubs = ",".join([terms[0] + "w"] + terms[1:]) + "->" + out + "w"
    return Dual(
        np.einsum(subscripts, x.val, *consts), np.einsum(dsubs, x.der, *consts, optimize=True)
    )


def congruence(r: np.ndarray, x):
    """r.T @ x @ r for a constant matrix r and a (possibly Dual) matrix x."""
    return const_einsum("...lm,li,mj->...ij", x, r, r)


def stack(parts: Sequence, axis: int = -1):
    """np.stack generalized to Dual operands (plains get zero derivatives)."""
    duals = [p for p in parts if isinstance(p, Dual)]
    if not duals:
        return np.stack(parts, axis=axis)
    w = duals[0].width
    vals = [value(p) for p in parts]
    ders = [partials(p, w) for p in parts]
    ax = axis if axis >= 0 else axis + vals[0].ndim + 1
    return Dual(np.stack(vals, axis=ax), np.stack(ders, axis=ax))


def concat(parts: Sequence, axis: int = -1):
    """np.concatenate generalized to Dual operands."""
    duals = [p for p in parts if isinstance(p, Dual)]
    if not duals:
        return np.concatenate(parts, axis=axis)
    w = duals[0].width
    vals = [value(p) for p in parts]
    ders = [partials(p, w) for p in parts]
    ax = axis if axis >= 0 else axis + vals[0].ndim
    return Dual(np.concatenate(vals, axis=ax), np.concatenate(ders, axis=ax))


def dsum(x, axis: int):
    """Sum along an axis of the value shape."""
    if not isinstance(x, Dual):
        return np.sum(x, axis=axis)
    ax = axis if axis >= 0 else axis + x.val.ndim
    return Dual(np.sum(x.val, axis=ax), np.sum(x.der, axis=ax))


def transpose2(x):
    """Swap the last two value axes."""
    if not isinstance(x, Dual):
        return np.swapaxes(x, -1, -2)
    return Dual(np.swapaxes(x.val, -1, -2), np.swapaxes(x.der, -2, -3))
