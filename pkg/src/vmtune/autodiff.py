"""Forward-mode dual numbers with a block of ``k`` tangents.

A :class:`Dual` stores a primal array of shape ``S`` and a tangent array of
shape ``(k,) + S``; tangent slot ``i`` is the derivative with respect to the
``i``-th seeded input.  The class is registered as a JAX pytree, so duals pass
through ``jax.jit``, ``jax.vmap`` and ``lax`` loops unchanged and the chain
rule below is compiled together with the primal computation.

Every function in this module accepts plain arrays as well as duals, which is
what lets the kinematics, dynamics and simulation code stay generic over the
scalar type.
"""

from __future__ import annotations

from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

__all__ = [
    "Dual",
    "DomainError",
    "lift",
    "is_dual",
    "primal",
    "tangent",
    "gradient",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "cosh",
    "sinh",
    "sin",
    "cos",
    "abs",
    "smooth_abs",
    "maximum",
    "minimum",
    "clip",
    "where",
    "stack",
    "concatenate",
    "matmul",
    "transpose",
    "dot",
    "cross",
    "norm",
    "sum",
    "solve_spd",
    "log_cosh",
    "tanh_over_x",
    "log_cosh_sq",
]


class DomainError(ValueError):
    """Raised when a function is evaluated outside its real domain."""


def _concrete(x) -> bool:
    return not isinstance(x, jax.core.Tracer)


def _check_domain(p, ok: Callable, name: str) -> None:
    if _concrete(p) and not bool(np.all(ok(np.asarray(p)))):
        raise DomainError(f"{name} evaluated outside its domain at primal {np.asarray(p)!r}")


def _bt(t, shape):
    """Broadcast tangent ``t`` of shape (k,)+S to (k,)+shape."""
    extra = len(shape) - (t.ndim - 1)
    if extra > 0:
        t = t.reshape(t.shape[:1] + (1,) * extra + t.shape[1:])
    return jnp.broadcast_to(t, t.shape[:1] + tuple(shape))


@jax.tree_util.register_pytree_node_class
class Dual:
    """Primal value plus ``k`` directional derivatives."""

    __slots__ = ("primal", "tangent")
    __array_ufunc__ = None
    __array_priority__ = 1000

    def __init__(self, primal, tangent):
        self.primal = primal
        self.tangent = tangent

    def tree_flatten(self):
        return (self.primal, self.tangent), None

    @classmethod
    def tree_unflatten(cls, aux, children):
        return cls(*children)

    @classmethod
    def constant(cls, value, k: int) -> "Dual":
        value = jnp.asarray(value)
        return cls(value, jnp.zeros((k,) + value.shape, value.dtype))

    @property
    def shape(self):
        return jnp.shape(self.primal)

    @property
    def ndim(self) -> int:
        return jnp.ndim(self.primal)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def n_tangents(self) -> int:
        return self.tangent.shape[0]

    def __len__(self) -> int:
        return self.shape[0]

    def __repr__(self) -> str:
        return f"Dual(primal={self.primal!r}, tangent={self.tangent!r})"

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        if isinstance(other, Dual):
            p = self.primal + other.primal
            return Dual(p, _bt(self.tangent, p.shape) + _bt(other.tangent, p.shape))
        p = self.primal + other
        return Dual(p, _bt(self.tangent, jnp.shape(p)))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            p = self.primal - other.primal
            return Dual(p, _bt(self.tangent, p.shape) - _bt(other.tangent, p.shape))
        p = self.primal - other
        return Dual(p, _bt(self.tangent, jnp.shape(p)))

    def __rsub__(self, other):
        p = other - self.primal
        return Dual(p, -_bt(self.tangent, jnp.shape(p)))

    def __mul__(self, other):
        if isinstance(other, Dual):
            p = self.primal * other.primal
            t = _bt(self.tangent, p.shape) * other.primal + self.primal * _bt(other.tangent, p.shape)
            return Dual(p, t)
        p = self.primal * other
        return Dual(p, _bt(self.tangent, jnp.shape(p)) * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            p = self.primal / other.primal
            t = (_bt(self.tangent, p.shape) - p * _bt(other.tangent, p.shape)) / other.primal
            return Dual(p, t)
        p = self.primal / other
        return Dual(p, _bt(self.tangent, jnp.shape(p)) / other)

    def __rtruediv__(self, other):
        p = other / self.primal
        return Dual(p, -_bt(self.tangent, jnp.shape(p)) * (p / self.primal))

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __pos__(self):
        return self

    def __pow__(self, n):
        if isinstance(n, Dual):
            return exp(n * log(self))
        if n == 2:
            return Dual(self.primal * self.primal, 2.0 * self.primal * self.tangent)
        return Dual(self.primal**n, (n * self.primal ** (n - 1)) * self.tangent)

    def __abs__(self):
        return abs(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    # comparisons act on primals and return plain boolean arrays
    def __lt__(self, other):
        return self.primal < primal(other)

    def __le__(self, other):
        return self.primal <= primal(other)

    def __gt__(self, other):
        return self.primal > primal(other)

    def __ge__(self, other):
        return self.primal >= primal(other)

    # indexing / shape -------------------------------------------------------
    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        return Dual(self.primal[idx], self.tangent[(slice(None),) + idx])

    @property
    def T(self):
        return self.transpose()

    def transpose(self, axes=None):
        nd = self.ndim
        if axes is None:
            axes = tuple(reversed(range(nd)))
        return Dual(jnp.transpose(self.primal, axes), jnp.transpose(self.tangent, (0,) + tuple(a + 1 for a in axes)))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        p = jnp.reshape(self.primal, shape)
        return Dual(p, jnp.reshape(self.tangent, (self.n_tangents,) + p.shape))

    def sum(self, axis=None):
        return sum(self, axis)


def is_dual(x) -> bool:
    return isinstance(x, Dual)


def primal(x):
    """Primal part of ``x`` (``x`` itself for plain values)."""
    return x.primal if isinstance(x, Dual) else x


def tangent(x, k: int):
    """Tangent block of ``x``; zeros of shape (k,)+shape for plain values."""
    if isinstance(x, Dual):
        return x.tangent
    x = jnp.asarray(x)
    return jnp.zeros((k,) + x.shape, x.dtype)


def _k_of(values) -> int | None:
    for v in values:
        if isinstance(v, Dual):
            return v.n_tangents
    return None


def lift(theta) -> Dual:
    """Seed ``theta`` with the identity tangent block (slot i <- e_i)."""
    theta = jnp.asarray(theta, dtype=float)
    if theta.ndim != 1:
        raise ValueError("lift expects a 1-D parameter vector")
    m = theta.shape[0]
    return Dual(theta, jnp.eye(m, dtype=theta.dtype))


# elementary functions ------------------------------------------------------

def _unary(x, f, df):
    if isinstance(x, Dual):
        p = f(x.primal)
        return Dual(p, df(x.primal, p) * x.tangent)
    return f(x)


def exp(x):
    return _unary(x, jnp.exp, lambda p, y: y)


def log(x):
    _check_domain(primal(x), lambda v: v > 0, "log")
    return _unary(x, jnp.log, lambda p, y: 1.0 / p)


def sqrt(x):
    _check_domain(primal(x), lambda v: v >= 0, "sqrt")
    return _unary(x, jnp.sqrt, lambda p, y: 0.5 / y)


def tanh(x):
    return _unary(x, jnp.tanh, lambda p, y: 1.0 - y * y)


def cosh(x):
    return _unary(x, jnp.cosh, lambda p, y: jnp.sinh(p))


def sinh(x):
    return _unary(x, jnp.sinh, lambda p, y: jnp.cosh(p))


def sin(x):
    return _unary(x, jnp.sin, lambda p, y: jnp.cos(p))


def cos(x):
    return _unary(x, jnp.cos, lambda p, y: -jnp.sin(p))


def abs(x):  # noqa: A001 - mirrors numpy naming
    return _unary(x, jnp.abs, lambda p, y: jnp.sign(p))


def smooth_abs(x, delta: float):
    """``sqrt(x^2 + delta^2) - delta``; smooth everywhere for delta > 0."""
    return sqrt(x * x + delta * delta) - delta


def where(cond, a, b):
    """Elementwise select; tangents follow the selected branch."""
    k = _k_of((a, b))
    if k is None:
        return jnp.where(cond, a, b)
    p = jnp.where(cond, primal(a), primal(b))
    shape = p.shape
    ta = _bt(tangent(a, k), shape)
    tb = _bt(tangent(b, k), shape)
    return Dual(p, jnp.where(cond, ta, tb))


def maximum(a, b):
    """Elementwise max; the tangent of the larger primal, ties take ``a``."""
    return where(primal(a) >= primal(b), a, b)


def minimum(a, b):
    """Elementwise min; the tangent of the smaller primal, ties take ``a``."""
    return where(primal(a) <= primal(b), a, b)


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


def log_cosh(x):
    """Overflow-safe ``ln cosh(x)``."""
    ax = abs(x)
    e = exp(-2.0 * ax)
    return ax + _unary(e, jnp.log1p, lambda p, y: 1.0 / (1.0 + p)) - np.log(2.0)


def tanh_over_x(x2):
    """``tanh(x)/x`` as a smooth function of ``x2 = x**2`` (equals 1 at 0)."""
    small = primal(x2) < 1e-4
    safe = where(small, 1.0, x2)
    x = sqrt(safe)
    big = tanh(x) / x
    series = 1.0 - x2 / 3.0 + (2.0 / 15.0) * x2 * x2
    return where(small, series, big)


def log_cosh_sq(x2):
    """``ln cosh(x)`` as a smooth function of ``x2 = x**2``."""
    small = primal(x2) < 1e-4
    safe = where(small, 1.0, x2)
    big = log_cosh(sqrt(safe))
    series = 0.5 * x2 - x2 * x2 / 12.0 + x2 * x2 * x2 / 45.0
    return where(small, series, big)


# array operations ----------------------------------------------------------

def _axis_t(axis: int) -> int:
    return axis + 1 if axis >= 0 else axis


def stack(values: Sequence, axis: int = 0):
    k = _k_of(values)
    if k is None:
        return jnp.stack([jnp.asarray(v) for v in values], axis=axis)
    ps = [jnp.asarray(primal(v), dtype=float) for v in values]
    ts = [tangent(v, k) for v in values]
    shape = jnp.broadcast_shapes(*[p.shape for p in ps])
    ps = [jnp.broadcast_to(p, shape) for p in ps]
    ts = [_bt(t, shape) for t in ts]
    return Dual(jnp.stack(ps, axis=axis), jnp.stack(ts, axis=_axis_t(axis)))


def concatenate(values: Sequence, axis: int = 0):
    k = _k_of(values)
    if k is None:
        return jnp.concatenate([jnp.asarray(v) for v in values], axis=axis)
    ps = [jnp.asarray(primal(v), dtype=float) for v in values]
    ts = [tangent(v, k) for v in values]
    return Dual(jnp.concatenate(ps, axis=axis), jnp.concatenate(ts, axis=_axis_t(axis)))


def _mm(a, b):
    """``matmul`` as broadcast-multiply-and-sum.

    Matrices here are at most a few rows wide; elementwise code lets XLA fuse
    them into the surrounding computation, where tiny dot kernels would not.
    """
    a = jnp.asarray(a)
    b = jnp.asarray(b)
    if b.ndim == 1:
        return jnp.sum(a * b, axis=-1)
    if a.ndim == 1:
        return jnp.sum(a[:, None] * b, axis=-2)
    return jnp.sum(a[..., :, :, None] * b[..., None, :, :], axis=-2)


def _mm_right(a, t):
    """``a @ b`` applied to the tangent block ``t`` of ``b``."""
    a = jnp.asarray(a)
    if t.ndim == 2:  # b is 1-D
        return _mm(t, a.T) if a.ndim == 2 else _mm(t, a)
    return _mm(a, t)


def matmul(a, b):
    if not isinstance(a, Dual) and not isinstance(b, Dual):
        return _mm(a, b)
    p = _mm(primal(a), primal(b))
    t = None
    if isinstance(a, Dual):
        t = _mm(a.tangent, primal(b))
    if isinstance(b, Dual):
        tb = _mm_right(primal(a), b.tangent)
        t = tb if t is None else t + tb
    return Dual(p, t)


def transpose(x):
    return x.T if isinstance(x, Dual) else jnp.transpose(x)


def sum(x, axis=None):  # noqa: A001
    if not isinstance(x, Dual):
        return jnp.sum(x, axis=axis)
    if axis is None:
        return Dual(jnp.sum(x.primal), jnp.sum(x.tangent, axis=tuple(range(1, x.tangent.ndim))))
    return Dual(jnp.sum(x.primal, axis=axis), jnp.sum(x.tangent, axis=_axis_t(axis)))


def dot(a, b):
    """Inner product over the last axis."""
    return sum(a * b, axis=-1)


def cross(a, b):
    """Cross product of 3-vectors (last axis).

    Plain and dual inputs share one formula so primals agree bit-for-bit.
    """
    if not isinstance(a, Dual):
        a = jnp.asarray(a)
    if not isinstance(b, Dual):
        b = jnp.asarray(b)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def norm(z):
    """Euclidean norm over the last axis with a zero tangent at the origin."""
    if not isinstance(z, Dual):
        return jnp.sqrt(jnp.sum(z * z, axis=-1))
    s = jnp.sum(z.primal * z.primal, axis=-1)
    pos = s > 0
    n = jnp.sqrt(jnp.where(pos, s, 1.0))
    t = jnp.sum(z.tangent * z.primal, axis=-1) / n
    return Dual(jnp.where(pos, n, 0.0), jnp.where(pos, t, 0.0))


def _cholesky(M):
    """Unrolled lower Cholesky factor as a nested list of scalars.

    For the small matrices met here, straight-line code vectorizes far better
    under ``vmap`` than a batched LAPACK call; a non-positive pivot yields NaN.
    """
    n = M.shape[-1]
    L = [[None] * n for _ in range(n)]
    for j in range(n):
        s = M[..., j, j]
        for k in range(j):
            s = s - L[j][k] * L[j][k]
        d = jnp.sqrt(s)
        L[j][j] = d
        for i in range(j + 1, n):
            s = M[..., i, j]
            for k in range(j):
                s = s - L[i][k] * L[j][k]
            L[i][j] = s / d
    return L


def _cho_solve(L, b):
    """Solve ``L L^T x = b`` over the last axis of ``b`` (leading axes broadcast)."""
    n = len(L)
    y = [None] * n
    for i in range(n):
        s = b[..., i]
        for k in range(i):
            s = s - L[i][k] * y[k]
        y[i] = s / L[i][i]
    x = [None] * n
    for i in reversed(range(n)):
        s = y[i]
        for k in range(i + 1, n):
            s = s - L[k][i] * x[k]
        x[i] = s / L[i][i]
    return jnp.stack(x, axis=-1)


def solve_spd(M, b):
    """Solve ``M x = b`` for symmetric positive definite ``M`` by Cholesky."""
    Mp = jnp.asarray(primal(M))
    bp = jnp.asarray(primal(b))
    if Mp.shape[-1] == 0:
        return b
    L = _cholesky(Mp)
    x = _cho_solve(L, bp)
    k = _k_of((M, b))
    if k is None:
        return x
    rhs = tangent(b, k)
    if isinstance(M, Dual):
        rhs = rhs - _mm(M.tangent, x)
    return Dual(x, _cho_solve(L, rhs))


# gradients -----------------------------------------------------------------

def gradient(loss: Callable, theta) -> tuple[float, np.ndarray]:
    """Value and gradient of a scalar ``loss(theta)`` by forward mode.

    The loss receives ``theta`` lifted to duals with identity seeding and must
    return a scalar (dual or plain).  A plain return means the loss does not
    depend on ``theta`` and yields a zero gradient.
    """
    theta = jnp.asarray(theta, dtype=float)
    out = loss(lift(theta))
    if isinstance(out, Dual):
        return float(out.primal), np.asarray(out.tangent, dtype=float).reshape(theta.shape[0])
    return float(out), np.zeros(theta.shape[0])
