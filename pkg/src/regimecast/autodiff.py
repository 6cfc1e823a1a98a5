"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: each `Tensor` wraps a float64 ndarray plus vector-Jacobian
closures back to its parents.  Every public op also accepts plain ndarrays
(or scalars) and then evaluates eagerly with no graph, so the same model
code serves both the training path (gradients) and the evaluation path
(plain numpy speed).

Scope is deliberately limited to the ops this package needs: elementwise
arithmetic and transcendentals, reductions, matmul (batched), shape ops,
indexing, logsumexp, gammaln, Cholesky and triangular solves.  Gradients
are checked against central finite differences in the test suite.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg as _sla
from scipy import special as _special


class Tensor:
    """Node in the reverse-mode tape.  Holds a float64 array."""

    __slots__ = ("value", "_parents", "_vjps", "grad")

    # Make ndarray OP Tensor defer to the reflected Tensor methods instead of
    # numpy building an object array.
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self._parents = parents
        self._vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # Arithmetic -----------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def tensor(value) -> Tensor:
    """Wrap a value as a leaf tensor."""
    return Tensor(value)


def value(x) -> np.ndarray:
    """Underlying array of a Tensor, or the input coerced to float64."""
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x, dtype=np.float64)


def is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def backward(out: Tensor) -> None:
    """Accumulate gradients of a scalar output into every reachable leaf."""
    if not isinstance(out, Tensor):
        raise TypeError("backward expects a Tensor output")
    if out.value.size != 1:
        raise ValueError("backward requires a scalar output")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(out, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    out.grad = np.ones_like(out.value)
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for parent, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            if parent.grad is None:
                parent.grad = contrib
            else:
                parent.grad = parent.grad + contrib


def grad_of(leaf: Tensor) -> np.ndarray:
    """Gradient accumulated on a leaf after backward(); zeros if unreached."""
    if leaf.grad is None:
        return np.zeros_like(leaf.value)
    return np.asarray(leaf.grad)


# Internal helpers ----------------------------------------------------------


def _unbroadcast(g, shape):
    g = np.asarray(g)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _unary(x, fwd, make_vjp):
    if isinstance(x, Tensor):
        out = fwd(x.value)
        return Tensor(out, (x,), (make_vjp(x.value, out),))
    return fwd(np.asarray(x, dtype=np.float64))


def _binary(a, b, fwd, vjp_a, vjp_b):
    ta, tb = isinstance(a, Tensor), isinstance(b, Tensor)
    av = a.value if ta else np.asarray(a, dtype=np.float64)
    bv = b.value if tb else np.asarray(b, dtype=np.float64)
    out = fwd(av, bv)
    if not (ta or tb):
        return out
    parents, vjps = [], []
    if ta:
        parents.append(a)
        vjps.append(lambda g, av=av, bv=bv: _unbroadcast(vjp_a(g, av, bv), av.shape))
    if tb:
        parents.append(b)
        vjps.append(lambda g, av=av, bv=bv: _unbroadcast(vjp_b(g, av, bv), bv.shape))
    return Tensor(out, tuple(parents), tuple(vjps))


# Elementwise ----------------------------------------------------------------


def add(a, b):
    return _binary(a, b, np.add, lambda g, av, bv: g, lambda g, av, bv: g)


def sub(a, b):
    return _binary(a, b, np.subtract, lambda g, av, bv: g, lambda g, av, bv: -g)


def mul(a, b):
    return _binary(a, b, np.multiply, lambda g, av, bv: g * bv, lambda g, av, bv: g * av)


def div(a, b):
    return _binary(
        a, b, np.divide,
        lambda g, av, bv: g / bv,
        lambda g, av, bv: -g * av / (bv * bv),
    )


def neg(x):
    return _unary(x, np.negative, lambda xv, out: lambda g: -g)


def power(x, p):
    p = float(p)
    return _unary(
        x, lambda v: np.power(v, p),
        lambda xv, out: lambda g: g * p * np.power(xv, p - 1.0),
    )


def square(x):
    return _unary(x, np.square, lambda xv, out: lambda g: g * 2.0 * xv)


def exp(x):
    return _unary(x, np.exp, lambda xv, out: lambda g: g * out)


def log(x):
    return _unary(x, np.log, lambda xv, out: lambda g: g / xv)


def log1p(x):
    return _unary(x, np.log1p, lambda xv, out: lambda g: g / (1.0 + xv))


def sqrt(x):
    return _unary(x, np.sqrt, lambda xv, out: lambda g: g * 0.5 / out)


def tanh(x):
    return _unary(x, np.tanh, lambda xv, out: lambda g: g * (1.0 - out * out))


def _sigmoid_val(x):
    t = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))


def sigmoid(x):
    return _unary(x, _sigmoid_val, lambda xv, out: lambda g: g * out * (1.0 - out))


def _softplus_val(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(x):
    return _unary(x, _softplus_val, lambda xv, out: lambda g: g * _sigmoid_val(xv))


def gammaln(x):
    return _unary(
        x, _special.gammaln,
        lambda xv, out: lambda g: g * _special.psi(xv),
    )


def erf(x):
    return _unary(
        x, _special.erf,
        lambda xv, out: lambda g: g * (2.0 / np.sqrt(np.pi)) * np.exp(-xv * xv),
    )


def clip_min(x, lo):
    lo = float(lo)
    return _unary(
        x, lambda v: np.maximum(v, lo),
        lambda xv, out: lambda g: g * (xv > lo),
    )


def where(cond, a, b):
    """Elementwise select; `cond` is a constant boolean array."""
    cond = np.asarray(cond, dtype=bool)
    return _binary(
        a, b,
        lambda av, bv: np.where(cond, av, bv),
        lambda g, av, bv: np.where(cond, g, 0.0),
        lambda g, av, bv: np.where(cond, 0.0, g),
    )


# Reductions -----------------------------------------------------------------


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        for ax in sorted(a % len(shape) for a in axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    return _unary(
        x, lambda v: np.sum(v, axis=axis, keepdims=keepdims),
        lambda xv, out: lambda g: _expand_reduced(g, xv.shape, axis, keepdims),
    )


def mean(x, axis=None, keepdims=False):
    def make_vjp(xv, out):
        count = xv.size if axis is None else np.prod(
            [xv.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return lambda g: _expand_reduced(g, xv.shape, axis, keepdims) / count

    return _unary(x, lambda v: np.mean(v, axis=axis, keepdims=keepdims), make_vjp)


def logsumexp(x, axis=-1, keepdims=False):
    def fwd(v):
        m = np.max(v, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        out = m + np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True))
        return out if keepdims else np.squeeze(out, axis=axis)

    def make_vjp(xv, out):
        ref = out if keepdims else np.expand_dims(out, axis)

        def vjp(g):
            ge = g if keepdims else np.expand_dims(g, axis)
            return ge * np.exp(xv - ref)

        return vjp

    return _unary(x, fwd, make_vjp)


def cumsum(x, axis):
    def make_vjp(xv, out):
        return lambda g: np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)

    return _unary(x, lambda v: np.cumsum(v, axis=axis), make_vjp)


# Shape ops ------------------------------------------------------------------


def reshape(x, shape):
    return _unary(
        x, lambda v: np.reshape(v, shape),
        lambda xv, out: lambda g: np.reshape(g, xv.shape),
    )


def transpose(x, axes):
    inv = tuple(np.argsort(axes))
    return _unary(
        x, lambda v: np.transpose(v, axes),
        lambda xv, out: lambda g: np.transpose(g, inv),
    )


def moveaxis(x, src, dst):
    v = value(x)
    axes = list(range(v.ndim))
    axes.insert(dst % v.ndim, axes.pop(src % v.ndim))
    return transpose(x, tuple(axes))


def concatenate(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    if not any(isinstance(x, Tensor) for x in xs):
        return out
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parents, vjps = [], []
    for i, x in enumerate(xs):
        if not isinstance(x, Tensor):
            continue
        lo, hi = int(offsets[i]), int(offsets[i + 1])

        def vjp(g, lo=lo, hi=hi):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]

        parents.append(x)
        vjps.append(vjp)
    return Tensor(out, tuple(parents), tuple(vjps))


def stack(xs, axis=0):
    vals = [value(x) for x in xs]
    out = np.stack(vals, axis=axis)
    if not any(isinstance(x, Tensor) for x in xs):
        return out
    parents, vjps = [], []
    for i, x in enumerate(xs):
        if not isinstance(x, Tensor):
            continue

        def vjp(g, i=i):
            return np.take(g, i, axis=axis)

        parents.append(x)
        vjps.append(vjp)
    return Tensor(out, tuple(parents), tuple(vjps))


def getitem(x, idx):
    def make_vjp(xv, out):
        advanced = _has_advanced_index(idx)

        def vjp(g):
            z = np.zeros_like(xv)
            if advanced:
                np.add.at(z, idx, g)
            else:
                z[idx] += g
            return z

        return vjp

    return _unary(x, lambda v: v[idx], make_vjp)


def _has_advanced_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


# Linear algebra -------------------------------------------------------------


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim == 1 and bv.ndim == 1:
        k = av.shape[0]
        return reshape(matmul(reshape(a, (1, k)), reshape(b, (k, 1))), ())
    if av.ndim == 1:
        k = av.shape[0]
        out = matmul(reshape(a, (1, k)), b)
        return reshape(out, value(out).shape[:-2] + value(out).shape[-1:])
    if bv.ndim == 1:
        k = bv.shape[0]
        out = matmul(a, reshape(b, (k, 1)))
        return reshape(out, value(out).shape[:-1])

    def vjp_a(g, av, bv):
        return g @ np.swapaxes(bv, -1, -2)

    def vjp_b(g, av, bv):
        return np.swapaxes(av, -1, -2) @ g

    return _binary(a, b, np.matmul, vjp_a, vjp_b)


def cholesky(a):
    """Lower Cholesky factor.  Raises np.linalg.LinAlgError when not PD."""

    def make_vjp(av, lv):
        def vjp(g):
            # Standard reverse-mode rule: with P = tril(L^T G, halved diag),
            # dA = L^{-T} P L^{-1}, symmetrised.
            p = np.tril(lv.T @ g)
            idx = np.arange(p.shape[0])
            p[idx, idx] *= 0.5
            w = _sla.solve_triangular(lv, p, lower=True, trans="T", check_finite=False)
            abar = _sla.solve_triangular(lv, w.T, lower=True, trans="T", check_finite=False).T
            return 0.5 * (abar + abar.T)

        return vjp

    return _unary(a, np.linalg.cholesky, make_vjp)


def solve_triangular(l, b, trans=False):
    """Solve L y = b (trans=False) or L^T y = b (trans=True), L lower."""
    tr = "T" if trans else "N"

    def fwd(lv, bv):
        return _sla.solve_triangular(lv, bv, lower=True, trans=tr, check_finite=False)

    def vjp_l(g, lv, bv):
        y = fwd(lv, bv)
        if trans:
            bbar = _sla.solve_triangular(lv, g, lower=True, trans="N", check_finite=False)
            lbar = -_outer_or_mat(y, bbar)
        else:
            bbar = _sla.solve_triangular(lv, g, lower=True, trans="T", check_finite=False)
            lbar = -_outer_or_mat(bbar, y)
        return np.tril(lbar)

    def vjp_b(g, lv, bv):
        back = "N" if trans else "T"
        return _sla.solve_triangular(lv, g, lower=True, trans=back, check_finite=False)

    return _binary(l, b, fwd, vjp_l, vjp_b)


def _outer_or_mat(u, v):
    if u.ndim == 1:
        return np.outer(u, v)
    return u @ v.T
