"""Base kernels, mixing kernel, Gram assembly, PSD and embedding identities."""

import numpy as np
import pytest

from regimecast import autodiff as ad
from regimecast import kernels as kn
from regimecast.errors import InvalidArgumentError, UnsupportedConfigError
from regimecast.gate import changepoint_gate


def random_locations(rng, n, r, d, gate_kind="dirichlet"):
    if gate_kind == "dirichlet":
        gates = rng.dirichlet(np.ones(r), size=n)
    else:
        gates = rng.normal(scale=2.0, size=(n, r))
    feats = rng.normal(size=(n, r, d))
    return [kn.LocationRepr(g, f) for g, f in zip(gates, feats)]


def test_rbf_values():
    p = kn.RegimeKernelParams(amplitude=1.7, lengthscale=0.9)
    z = np.array([0.3, -1.0])
    assert kn.rbf(z, z, p) == pytest.approx(1.7**2)
    p1 = kn.RegimeKernelParams(1.0, 1.0)
    a = np.zeros(2)
    b = np.array([np.sqrt(2.0), 0.0])
    assert kn.rbf(a, b, p1) == pytest.approx(np.exp(-1.0), rel=1e-12)
    # doubling the lengthscale at fixed ||z-z'||^2 = 2 l_old^2
    p2 = kn.RegimeKernelParams(1.0, 2.0)
    assert kn.rbf(a, b, p2) == pytest.approx(np.exp(-0.25), rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        kn.rbf(np.zeros(2), np.zeros(3), p1)
    with pytest.raises(InvalidArgumentError):
        kn.RegimeKernelParams(-1.0, 1.0)


def test_rq_values():
    p = kn.RQKernelParams(amplitude=2.0, lengthscale=1.3, shape=0.7)
    z = np.array([1.0, 2.0, 3.0])
    assert kn.rq(z, z, p) == pytest.approx(4.0)
    p1 = kn.RQKernelParams(1.0, 1.0, 1.0)
    a, b = np.zeros(1), np.array([np.sqrt(2.0)])
    assert kn.rq(a, b, p1) == pytest.approx(0.5, rel=1e-12)
    big = kn.RQKernelParams(1.4, 0.8, 1e6)
    rbf_p = kn.RegimeKernelParams(1.4, 0.8)
    for d2 in [0.1, 1.0, 4.0]:
        b = np.array([np.sqrt(d2)])
        assert abs(kn.rq(np.zeros(1), b, big) - kn.rbf(np.zeros(1), b, rbf_p)) < 1e-4


def test_mix_kernel_disjoint_and_collapse():
    regimes = [kn.RegimeKernelParams(1.2, 1.0), kn.RegimeKernelParams(0.7, 2.0)]
    f = np.random.default_rng(0).normal(size=(2, 3))
    x1 = kn.LocationRepr(np.array([1.0, 0.0]), f)
    x2 = kn.LocationRepr(np.array([0.0, 1.0]), f + 0.1)
    assert kn.mix_kernel(x1, x2, regimes) == 0.0
    single = kn.LocationRepr(np.array([1.0]), f[:1])
    single2 = kn.LocationRepr(np.array([1.0]), f[:1] + 0.3)
    assert kn.mix_kernel(single, single2, [regimes[0]]) == pytest.approx(
        kn.rbf(f[0], f[0] + 0.3, regimes[0])
    )
    gate = np.array([0.3, 0.7])
    same = kn.LocationRepr(gate, f)
    assert kn.mix_kernel(same, same, regimes) == pytest.approx(
        0.3**2 * 1.2**2 + 0.7**2 * 0.7**2
    )
    with pytest.raises(InvalidArgumentError):
        kn.mix_kernel(same, same, [regimes[0]])


def test_mix_kernel_symmetry():
    rng = np.random.default_rng(5)
    regimes = [kn.RegimeKernelParams(*rng.uniform(0.5, 2.0, size=2)) for _ in range(3)]
    locs = random_locations(rng, 8, 3, 4, gate_kind="real")
    for a in locs[:4]:
        for b in locs[4:]:
            assert kn.mix_kernel(a, b, regimes) == kn.mix_kernel(b, a, regimes)


def test_gram_matches_scalar_and_symmetry():
    rng = np.random.default_rng(1)
    regimes = [kn.RegimeKernelParams(*rng.uniform(0.5, 2.0, size=2)) for _ in range(3)]
    locs = random_locations(rng, 6, 3, 4)
    locs2 = random_locations(rng, 5, 3, 4)
    g = kn.gram(locs, locs2, regimes)
    assert g.shape == (6, 5)
    for i in [0, 3]:
        for j in [1, 4]:
            assert g[i, j] == pytest.approx(
                kn.mix_kernel(locs[i], locs2[j], regimes), rel=1e-12
            )
    sym = kn.gram(locs, locs, regimes)
    np.testing.assert_allclose(sym, sym.T, atol=1e-15)
    one = kn.gram(locs[:1], locs[:1], regimes)
    assert one.shape == (1, 1)
    assert one[0, 0] == pytest.approx(kn.mix_kernel(locs[0], locs[0], regimes))
    with pytest.raises(InvalidArgumentError):
        kn.gram([], locs, regimes)


@pytest.mark.parametrize("base", ["rbf", "rq", "linear"])
def test_gram_psd_arbitrary_real_gates(base):
    rng = np.random.default_rng(42)
    for _ in range(60):
        n, r, d = int(rng.integers(2, 30)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
        gates = rng.normal(scale=3.0, size=(n, r))
        feats = rng.normal(scale=2.0, size=(n, r, d))
        amps = rng.uniform(0.3, 3.0, size=r)
        ells = rng.uniform(0.3, 3.0, size=r)
        shapes = rng.uniform(0.3, 3.0, size=r) if base == "rq" else None
        g = kn.mix_gram(gates, feats, gates, feats, amps, ells, base=base, rq_shape=shapes)
        assert kn.min_relative_eigenvalue(g) >= -1e-8


def test_gram_block_diagonal_under_onehot_gates():
    rng = np.random.default_rng(7)
    regimes = [kn.RegimeKernelParams(1.0, 1.0), kn.RegimeKernelParams(2.0, 0.5)]
    locs = []
    labels = []
    for i in range(10):
        lab = i % 2
        gate = np.eye(2)[lab]
        locs.append(kn.LocationRepr(gate, rng.normal(size=(2, 3))))
        labels.append(lab)
    order = np.argsort(labels, kind="stable")
    g = kn.gram([locs[i] for i in order], [locs[i] for i in order], regimes)
    np.testing.assert_allclose(g[:5, 5:], 0.0, atol=1e-15)
    np.testing.assert_allclose(g[5:, :5], 0.0, atol=1e-15)
    assert np.all(np.abs(np.diag(g)) > 0)


def test_direct_sum_identity():
    rng = np.random.default_rng(11)
    regimes = [
        kn.RegimeKernelParams(float(a), 1.0) for a in rng.uniform(0.5, 1.5, size=4)
    ]
    worst = 0.0
    for _ in range(1000):
        l1 = random_locations(rng, 1, 4, 3)[0]
        l2 = random_locations(rng, 1, 4, 3)[0]
        lhs = float(
            np.dot(kn.direct_sum_embed(l1, regimes), kn.direct_sum_embed(l2, regimes))
        )
        rhs = kn.mix_kernel(l1, l2, regimes, base="linear")
        worst = max(worst, abs(lhs - rhs))
    assert worst < 1e-12


def test_direct_sum_structure_and_errors():
    regimes = [kn.RegimeKernelParams(1.0, 1.0), kn.RegimeKernelParams(3.0, 1.0)]
    feats = np.arange(6.0).reshape(2, 3)
    onehot = kn.LocationRepr(np.array([0.0, 1.0]), feats)
    emb = kn.direct_sum_embed(onehot, regimes)
    np.testing.assert_allclose(emb[:3], 0.0)
    np.testing.assert_allclose(emb[3:], 3.0 * feats[1])
    zero = kn.LocationRepr(np.array([0.4, 0.6]), np.zeros((2, 3)))
    assert kn.mix_kernel(zero, onehot, regimes, base="linear") == 0.0
    with pytest.raises(UnsupportedConfigError):
        kn.direct_sum_embed(onehot, regimes, base="rbf")


def test_changepoint_kernel_limits():
    k1 = kn.RegimeKernelParams(1.0, 1.0)
    k2 = kn.RegimeKernelParams(2.0, 3.0)
    regimes = [k1, k2]
    feats = np.random.default_rng(3).normal(size=(2, 2))
    tau, beta = 0.0, 30.0

    def loc_at(t):
        return kn.LocationRepr(changepoint_gate(t, tau, beta), feats)

    early = kn.mix_kernel(loc_at(-1.0), loc_at(-1.5), regimes)
    assert early == pytest.approx(kn.rbf(feats[0], feats[0], k1), abs=1e-6)
    late = kn.mix_kernel(loc_at(1.0), loc_at(1.5), regimes)
    assert late == pytest.approx(kn.rbf(feats[1], feats[1], k2), abs=1e-6)


def test_mix_gram_gradients():
    from test_autodiff import fd_grad

    rng = np.random.default_rng(9)
    n, m, r, d = 4, 3, 2, 2
    gates1 = rng.dirichlet(np.ones(r), size=n)
    feats1 = rng.normal(size=(n, r, d))
    gates2 = rng.dirichlet(np.ones(r), size=m)
    feats2 = rng.normal(size=(m, r, d))
    w = rng.normal(size=(n, m))

    def run(log_a):
        def build(t):
            amps = ad.exp(t)
            g = kn.mix_gram(gates1, feats1, gates2, feats2, amps, np.array([1.0, 2.0]))
            return ad.sum(g * w)

        leaf = ad.tensor(log_a)
        ad.backward(build(leaf))
        want = fd_grad(
            lambda v: float(np.reshape(ad.value(build(ad.tensor(v))), ())), log_a
        )
        np.testing.assert_allclose(ad.grad_of(leaf), want, rtol=1e-6, atol=1e-9)

    run(np.array([0.2, -0.4]))

    def build_feats(t):
        g = kn.mix_gram(gates1, t, gates2, feats2, np.ones(r), np.full(r, 1.3))
        return ad.sum(g * w)

    leaf = ad.tensor(feats1)
    ad.backward(build_feats(leaf))
    want = fd_grad(
        lambda v: float(np.reshape(ad.value(build_feats(ad.tensor(v))), ())), feats1
    )
    np.testing.assert_allclose(ad.grad_of(leaf), want, rtol=1e-6, atol=1e-9)


def test_mix_gram_diag_matches_dense():
    rng = np.random.default_rng(13)
    gates = rng.dirichlet(np.ones(3), size=6)
    feats = rng.normal(size=(6, 3, 4))
    amps = rng.uniform(0.5, 2.0, size=3)
    ells = rng.uniform(0.5, 2.0, size=3)
    dense = kn.mix_gram(gates, feats, gates, feats, amps, ells)
    np.testing.assert_allclose(
        kn.mix_gram_diag(gates, feats, amps), np.diag(dense), rtol=1e-12
    )
    lin_dense = kn.mix_gram(gates, feats, gates, feats, amps, ells, base="linear")
    np.testing.assert_allclose(
        kn.mix_gram_diag(gates, feats, amps, base="linear"),
        np.diag(lin_dense),
        rtol=1e-12,
        atol=1e-14,
    )
