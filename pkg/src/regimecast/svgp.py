"""Sparse variational GP over the forecast residual.

The variational posterior lives on M inducing locations that are free
parameters in gate-logit x feature space, so every kernel evaluation goes
through the same regime-mixing kernel as data locations.  Marginal
posteriors and the Gaussian KL are computed from triangular factors; a
jitter ladder guards the K_ZZ factorisation.

All core routines accept autodiff tensors or plain arrays.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import kernels as kn
from .errors import InvalidArgumentError, NumericalError
from .gate import stick_break

JITTER_LADDER = (0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2)

# Diagnostic threshold: variances below -1e-6 * K_xx before the clamp at 0
# indicate a genuinely inconsistent state rather than rounding.
_NEGATIVE_VAR_REL_WARN = 1e-6


@dataclass
class RegimeOffsets:
    """Per-regime constant prior offsets b_r."""

    b: np.ndarray

    def __post_init__(self):
        arr = ad.value(self.b)
        if not np.all(np.isfinite(arr)):
            raise InvalidArgumentError("regime offsets must be finite")


@dataclass
class ResidualPosterior:
    """Marginal residual posterior: mean and non-negative variance."""

    mean: float
    variance: float


@dataclass
class InducingState:
    """Free inducing locations plus the Gaussian variational state.

    gate_logits: (M, R-1) stick-breaking logits (or (M, R) for a softmax
    gate); features: (M, R, d_g); m: (M,); s_raw: (M, M) unconstrained
    lower-triangular factor whose diagonal passes through softplus.
    """

    gate_logits: np.ndarray
    features: np.ndarray
    m: np.ndarray
    s_raw: np.ndarray

    @property
    def count(self) -> int:
        return ad.value(self.m).shape[0]

    def gates(self, temperature: float = 1.0):
        return stick_break(self.gate_logits, temperature)

    def s_factor(self):
        return s_factor_from_raw(self.s_raw)


def softplus_inverse(y):
    """x with softplus(x) = y, for y > 0."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise InvalidArgumentError("softplus inverse requires positive input")
    return np.log(np.expm1(y))


def s_factor_from_raw(s_raw):
    """Lower-triangular factor with softplus-positive diagonal."""
    n = ad.value(s_raw).shape[0]
    strict = np.tril(np.ones((n, n)), -1)
    idx = np.arange(n)
    diag = ad.softplus(s_raw[idx, idx])
    return s_raw * strict + np.eye(n) * ad.reshape(diag, (n, 1))


def raw_from_s_factor(factor: np.ndarray) -> np.ndarray:
    """Inverse of s_factor_from_raw for test construction."""
    factor = np.asarray(factor, dtype=float)
    n = factor.shape[0]
    raw = np.tril(factor, -1)
    raw[np.arange(n), np.arange(n)] = softplus_inverse(np.diag(factor))
    return raw


def residual_prior_mean(gates, offsets):
    """Gate-weighted constant prior mean sum_r pi_r b_r; batched over rows."""
    b = offsets.b if isinstance(offsets, RegimeOffsets) else offsets
    if ad.value(gates).shape[-1] != ad.value(b).shape[0]:
        raise InvalidArgumentError("gate length must match offsets length")
    return ad.matmul(gates, b)


def chol_with_jitter(mat):
    """Cholesky of mat + j*I for the smallest working jitter on the ladder.

    Returns (lower factor, jitter used).  The probe factorisation runs on
    plain values; the returned factor is rebuilt through the autodiff op so
    gradients flow when `mat` is a tensor.
    """
    vals = ad.value(mat)
    if vals.ndim != 2 or vals.shape[0] != vals.shape[1]:
        raise InvalidArgumentError("chol_with_jitter requires a square matrix")
    if not np.allclose(vals, vals.T, atol=1e-10, rtol=0):
        raise InvalidArgumentError("chol_with_jitter requires a symmetric matrix")
    n = vals.shape[0]
    eye = np.eye(n)
    for jitter in JITTER_LADDER:
        try:
            np.linalg.cholesky(vals + jitter * eye if jitter else vals)
        except np.linalg.LinAlgError:
            continue
        shifted = mat + jitter * eye if jitter else mat
        return ad.cholesky(shifted), jitter
    raise NumericalError(
        "Cholesky failed at every jitter level", jitter=JITTER_LADDER[-1]
    )


def _inducing_parts(ind: InducingState, temperature: float):
    return ind.gates(temperature), ind.features


def marginal_posterior_parts(
    gates_x,
    feats_x,
    gates_z,
    feats_z,
    m,
    s_factor,
    offsets_b,
    amplitudes,
    lengthscales,
    base="rbf",
    rq_shape=None,
):
    """Batched residual posterior (mean (N,), variance (N,)) and K_ZZ factor.

    mean = m0(x) + K_xZ K_ZZ^{-1} (m - m0(Z))
    var  = K_xx - K_xZ K_ZZ^{-1} (K_ZZ - S) K_ZZ^{-1} K_Zx, clamped at 0.
    """
    kzz = kn.mix_gram(
        gates_z, feats_z, gates_z, feats_z, amplitudes, lengthscales, base, rq_shape
    )
    l, jitter = chol_with_jitter(kzz)
    kxz = kn.mix_gram(
        gates_x, feats_x, gates_z, feats_z, amplitudes, lengthscales, base, rq_shape
    )
    kxx = kn.mix_gram_diag(gates_x, feats_x, amplitudes, base=base)
    a = ad.solve_triangular(l, ad.transpose(kxz, (1, 0)))
    resid = m - residual_prior_mean(gates_z, offsets_b)
    alpha = ad.solve_triangular(l, resid)
    mean = residual_prior_mean(gates_x, offsets_b) + ad.matmul(
        ad.transpose(a, (1, 0)), alpha
    )
    qf_prior = ad.sum(a * a, axis=0)
    w = ad.solve_triangular(l, a, trans=True)
    v = ad.matmul(ad.transpose(s_factor, (1, 0)), w)
    qf_post = ad.sum(v * v, axis=0)
    raw_var = kxx - qf_prior + qf_post
    raw_vals = ad.value(raw_var)
    kxx_vals = ad.value(kxx)
    floor_rel = raw_vals < -_NEGATIVE_VAR_REL_WARN * np.maximum(kxx_vals, 1e-300)
    if np.any(floor_rel):
        warnings.warn(
            "residual posterior variance clipped beyond rounding tolerance",
            RuntimeWarning,
            stacklevel=2,
        )
    return mean, ad.clip_min(raw_var, 0.0), l, jitter


def _regime_arrays(regimes):
    amps = np.array([p.amplitude for p in regimes])
    ells = np.array([p.lengthscale for p in regimes])
    return amps, ells


def marginal_posterior(
    loc: kn.LocationRepr,
    ind: InducingState,
    offsets,
    regimes,
    temperature: float = 1.0,
    base: str = "rbf",
) -> ResidualPosterior:
    """Residual posterior at a single location."""
    amps, ells = _regime_arrays(regimes)
    gates_z, feats_z = _inducing_parts(ind, temperature)
    b = offsets.b if isinstance(offsets, RegimeOffsets) else np.asarray(offsets)
    mean, var, _, _ = marginal_posterior_parts(
        loc.gate[None, :],
        loc.features[None, :, :],
        gates_z,
        feats_z,
        ind.m,
        ind.s_factor(),
        b,
        amps,
        ells,
        base=base,
    )
    return ResidualPosterior(float(ad.value(mean)[0]), float(ad.value(var)[0]))


def gaussian_kl(kzz, s_factor, resid):
    """KL( N(resid, S) || N(0, K) ) from the factor S = C C^T.

    0.5 [ tr(K^{-1} S) + resid^T K^{-1} resid - M + log|K| - log|S| ].
    """
    l, _ = chol_with_jitter(kzz)
    n = ad.value(resid).shape[0]
    idx = np.arange(n)
    linv_c = ad.solve_triangular(l, s_factor)
    trace = ad.sum(linv_c * linv_c)
    quad = ad.sum(ad.solve_triangular(l, resid) ** 2.0)
    logdet_k = 2.0 * ad.sum(ad.log(l[idx, idx]))
    logdet_s = 2.0 * ad.sum(ad.log(s_factor[idx, idx]))
    return 0.5 * (trace + quad - float(n) + logdet_k - logdet_s)


def kl_parts(gates_z, feats_z, m, s_factor, offsets_b, amplitudes, lengthscales,
             base="rbf", rq_shape=None):
    """KL(q(u) || p(u)) from triangular factors (tensor-compatible)."""
    kzz = kn.mix_gram(
        gates_z, feats_z, gates_z, feats_z, amplitudes, lengthscales, base, rq_shape
    )
    resid = m - residual_prior_mean(gates_z, offsets_b)
    return gaussian_kl(kzz, s_factor, resid)


def kl_to_prior(
    ind: InducingState, offsets, regimes, temperature: float = 1.0, base: str = "rbf"
) -> float:
    """Gaussian KL between the variational state and the GP prior at Z."""
    amps, ells = _regime_arrays(regimes)
    gates_z, feats_z = _inducing_parts(ind, temperature)
    b = offsets.b if isinstance(offsets, RegimeOffsets) else np.asarray(offsets)
    kl = kl_parts(gates_z, feats_z, ind.m, ind.s_factor(), b, amps, ells, base=base)
    return float(ad.value(kl))
