"""Finite-difference validation of the reverse-mode tape.

Every op gets a central-difference check at eps=1e-5; structural behaviour
(broadcasting, node reuse, eager numpy path) is covered separately.
"""

import numpy as np
import pytest

from regimecast import autodiff as ad


def fd_grad(f, x, eps=1e-5):
    """Central finite differences of a scalar function of one array.

    Operates on a copy so closures capturing the original array keep it
    as a genuine constant.
    """
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def check_grad(build, x, eps=1e-5, tol=1e-6):
    """Compare tape gradient of build(leaf) against finite differences."""
    leaf = ad.tensor(x)
    out = build(leaf)
    ad.backward(out)
    got = ad.grad_of(leaf)
    want = fd_grad(
        lambda v: float(np.reshape(ad.value(build(ad.tensor(v))), ())), x, eps=eps
    )
    scale = max(np.linalg.norm(want), 1.0)
    assert np.linalg.norm(got - want) / scale < tol, (got, want)


RNG = np.random.default_rng(7)


@pytest.mark.parametrize(
    "build",
    [
        lambda t: ad.sum(ad.exp(t)),
        lambda t: ad.sum(ad.log(ad.clip_min(t * t, 1e-8) + 1.0)),
        lambda t: ad.sum(ad.log1p(ad.square(t))),
        lambda t: ad.sum(ad.sqrt(t * t + 1.0)),
        lambda t: ad.sum(ad.tanh(t)),
        lambda t: ad.sum(ad.sigmoid(3.0 * t)),
        lambda t: ad.sum(ad.softplus(t - 1.0)),
        lambda t: ad.sum(ad.square(t) / (1.0 + ad.exp(-t))),
        lambda t: ad.sum((2.0 - t) * t + t / 3.0 - 0.5 * t),
        lambda t: ad.sum(ad.power(ad.clip_min(t, 1e-3) + 2.0, 1.7)),
        lambda t: ad.mean(t * t, axis=1).__getitem__(0) + ad.mean(t),
        lambda t: ad.sum(ad.cumsum(t, axis=1) * 0.3),
        lambda t: ad.logsumexp(ad.reshape(t, (6,)), axis=0),
        lambda t: ad.sum(ad.logsumexp(t * 2.0, axis=0)),
        lambda t: ad.sum(ad.logsumexp(t, axis=1, keepdims=True)),
        lambda t: ad.sum(ad.gammaln(ad.softplus(t) + 0.5)),
        lambda t: ad.sum(ad.erf(t)),
        lambda t: ad.sum(ad.where(np.array([[True, False, True]] * 2), t, t * t)),
        lambda t: ad.sum(ad.concatenate([t, t * 2.0], axis=0)),
        lambda t: ad.sum(ad.stack([t, ad.exp(t)], axis=1) @ np.ones((3,))),
        lambda t: ad.sum(ad.transpose(t, (1, 0)) @ t),
        lambda t: ad.sum(t[0, :] * t[1, :]) + ad.sum(t[:, 2]),
    ],
)
def test_elementwise_and_shape_ops(build):
    check_grad(build, RNG.normal(size=(2, 3)))


def test_sum_axis_variants():
    x = RNG.normal(size=(2, 3, 4))
    check_grad(lambda t: ad.sum(ad.sum(t, axis=(0, 2)) ** 2.0), x)
    check_grad(lambda t: ad.sum(ad.sum(t, axis=1, keepdims=True) * x), x)
    check_grad(lambda t: ad.mean(t, axis=(1, 2))[0] * 3.0, x)


def test_broadcasting_binary_ops():
    a = RNG.normal(size=(4, 1, 3))
    b = RNG.normal(size=(2, 3))

    def build_a(t):
        return ad.sum(t * b + t / (np.abs(b) + 1.0) - b)

    check_grad(build_a, a)

    def build_b(t):
        return ad.sum(a * t + (a - t) ** 2.0)

    check_grad(build_b, b)


def test_matmul_batched_and_vectors():
    a = RNG.normal(size=(5, 2, 3))
    b = RNG.normal(size=(3, 4))
    check_grad(lambda t: ad.sum(ad.matmul(t, b) ** 2.0), a)
    check_grad(lambda t: ad.sum(ad.matmul(a, t) ** 2.0), b)
    v = RNG.normal(size=3)
    m = RNG.normal(size=(3, 3))
    check_grad(lambda t: ad.sum(ad.matmul(t, m)), v)
    check_grad(lambda t: ad.sum(ad.matmul(m, t) * v), v)
    check_grad(lambda t: ad.matmul(v, ad.matmul(t, v)), m)


def test_fancy_index_scatter():
    x = RNG.normal(size=(5,))
    idx = np.array([0, 2, 2, 4])

    def build(t):
        return ad.sum(t[idx] * np.array([1.0, 2.0, 3.0, 4.0]))

    check_grad(build, x)
    # duplicate index 2 must accumulate both slots
    leaf = ad.tensor(x)
    ad.backward(build(leaf))
    assert ad.grad_of(leaf)[2] == pytest.approx(5.0)


def test_node_reuse_accumulates():
    x = np.array([1.5, -0.3])

    def build(t):
        h = ad.exp(t)
        return ad.sum(h * h + h)

    check_grad(build, x)


def test_cholesky_and_solves():
    n = 5
    w = RNG.normal(size=(n, n))
    spd = w @ w.T + n * np.eye(n)
    y = RNG.normal(size=n)
    b2 = RNG.normal(size=(n, 2))

    def logdet(t):
        l = ad.cholesky(t)
        idx = np.arange(n)
        return 2.0 * ad.sum(ad.log(l[idx, idx]))

    sym = lambda v: 0.5 * (v + np.swapaxes(v, -1, -2))

    def check_sym(build):
        # project both gradients onto symmetric matrices: the input stays SPD
        leaf = ad.tensor(spd)
        ad.backward(build(leaf))
        got = sym(ad.grad_of(leaf))
        want = sym(
            fd_grad(
                lambda v: float(ad.value(build(ad.tensor(sym(v))))), spd
            )
        )
        assert np.linalg.norm(got - want) / max(np.linalg.norm(want), 1.0) < 1e-6

    check_sym(logdet)
    check_sym(lambda t: ad.sum(ad.solve_triangular(ad.cholesky(t), y) ** 2.0))
    check_sym(
        lambda t: ad.sum(ad.solve_triangular(ad.cholesky(t), b2, trans=True) ** 2.0)
    )
    # direct solve gradients wrt L and b on a fixed lower-triangular matrix
    l0 = np.linalg.cholesky(spd)

    def wrt_l(t):
        tl = ad.where(np.tril(np.ones((n, n), dtype=bool)), t, np.zeros((n, n)))
        return ad.sum(ad.solve_triangular(tl, b2) * b2)

    check_grad(wrt_l, l0)
    check_grad(lambda t: ad.sum(ad.solve_triangular(l0, t, trans=True) ** 2.0), b2)
    # logdet oracle
    assert float(ad.value(logdet(ad.tensor(spd)))) == pytest.approx(
        np.linalg.slogdet(spd)[1], abs=1e-10
    )


def test_eager_numpy_path_matches_tape():
    x = RNG.normal(size=(3, 4))
    ops = [
        lambda t: ad.softplus(t),
        lambda t: ad.logsumexp(t, axis=1),
        lambda t: ad.sigmoid(t) * ad.exp(t),
        lambda t: ad.cumsum(t, axis=0),
    ]
    for op in ops:
        eager = ad.value(op(x))
        taped = ad.value(op(ad.tensor(x)))
        np.testing.assert_allclose(eager, taped, rtol=0, atol=0)
    assert isinstance(ad.softplus(x), np.ndarray)
    assert isinstance(ad.softplus(ad.tensor(x)), ad.Tensor)


def test_backward_requires_scalar():
    t = ad.tensor(np.ones(3))
    with pytest.raises(ValueError):
        ad.backward(t * 2.0)


def test_stable_extremes():
    big = np.array([800.0, -800.0])
    assert np.all(np.isfinite(ad.value(ad.softplus(big))))
    assert np.all(np.isfinite(ad.value(ad.sigmoid(big))))
    lse = ad.value(ad.logsumexp(np.array([-1e4, -1e4 + 1.0]), axis=0))
    assert np.isfinite(lse)
    assert lse == pytest.approx(-1e4 + np.log1p(np.e), abs=1e-9)
