"""Base kernels and the gate-weighted regime-mixing kernel.

The mixing kernel between two locations is

    K_mix(x, x') = sum_r g_r(x) g_r(x') K_r(z_r(x), z_r(x'))

with per-regime base kernels K_r over learned regime features.  Because each
term is a rank-style congruence G_r K_r G_r, the Gram matrix is positive
semi-definite for *any* real-valued gate values, simplex or not; tests
exercise that generality.  Scalar ops mirror that contract one pair at a
time; `mix_gram` is the vectorised workhorse (autodiff-compatible) used by
the sparse GP layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError, UnsupportedConfigError


@dataclass(frozen=True)
class RegimeKernelParams:
    """Per-regime RBF (or linear) kernel parameters, isotropic lengthscale."""

    amplitude: float
    lengthscale: float

    def __post_init__(self):
        if not (self.amplitude > 0 and self.lengthscale > 0):
            raise InvalidArgumentError("kernel amplitude and lengthscale must be > 0")


@dataclass(frozen=True)
class RQKernelParams:
    """Rational-quadratic kernel parameters with shape alpha > 0."""

    amplitude: float
    lengthscale: float
    shape: float

    def __post_init__(self):
        if not (self.amplitude > 0 and self.lengthscale > 0 and self.shape > 0):
            raise InvalidArgumentError("RQ kernel parameters must all be > 0")


@dataclass(frozen=True)
class LocationRepr:
    """Gate vector (R,) plus per-regime feature vectors (R, d_g).

    The gate is a simplex vector in normal operation, but none of the kernel
    algebra requires that; PSD holds for arbitrary real gates.
    """

    gate: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gate", np.asarray(self.gate, dtype=float))
        object.__setattr__(self, "features", np.asarray(self.features, dtype=float))
        if self.features.ndim != 2 or self.gate.ndim != 1:
            raise InvalidArgumentError("gate must be (R,), features (R, d_g)")
        if self.features.shape[0] != self.gate.shape[0]:
            raise InvalidArgumentError("gate length must match feature rows")
        if not (np.all(np.isfinite(self.gate)) and np.all(np.isfinite(self.features))):
            raise InvalidArgumentError("location representation must be finite")


def _check_dims(z, z2):
    z, z2 = np.asarray(z, dtype=float), np.asarray(z2, dtype=float)
    if z.shape != z2.shape:
        raise InvalidArgumentError("feature dimension mismatch")
    return z, z2


def rbf(z, z2, params: RegimeKernelParams) -> float:
    """a^2 exp(-||z - z'||^2 / (2 l^2))."""
    z, z2 = _check_dims(z, z2)
    d2 = float(np.sum((z - z2) ** 2))
    return params.amplitude**2 * float(np.exp(-d2 / (2.0 * params.lengthscale**2)))


def rq(z, z2, params: RQKernelParams) -> float:
    """a^2 (1 + ||z - z'||^2 / (2 alpha l^2))^(-alpha)."""
    z, z2 = _check_dims(z, z2)
    d2 = float(np.sum((z - z2) ** 2))
    return params.amplitude**2 * float(
        (1.0 + d2 / (2.0 * params.shape * params.lengthscale**2)) ** (-params.shape)
    )


def linear_kernel(z, z2, amplitude: float) -> float:
    """a^2 <z, z'>; finite-dimensional base kernel used by embedding tests."""
    z, z2 = _check_dims(z, z2)
    return amplitude**2 * float(np.dot(z, z2))


def _base_eval(z, z2, params, base: str) -> float:
    if base == "rbf":
        return rbf(z, z2, params)
    if base == "rq":
        return rq(z, z2, params)
    if base == "linear":
        return linear_kernel(z, z2, params.amplitude)
    raise InvalidArgumentError(f"unknown base kernel '{base}'")


def mix_kernel(x1: LocationRepr, x2: LocationRepr, regimes, base: str = "rbf") -> float:
    """Gate-weighted sum of per-regime base kernels between two locations."""
    if len(regimes) != x1.gate.shape[0] or len(regimes) != x2.gate.shape[0]:
        raise InvalidArgumentError("number of regime params must match gate length")
    total = 0.0
    for r, params in enumerate(regimes):
        total += (
            x1.gate[r]
            * x2.gate[r]
            * _base_eval(x1.features[r], x2.features[r], params, base)
        )
    return float(total)


def gram(locs, locs2, regimes, base: str = "rbf") -> np.ndarray:
    """Gram matrix of mix_kernel over two location lists (vectorised)."""
    if len(locs) == 0 or len(locs2) == 0:
        raise InvalidArgumentError("gram requires nonempty location lists")
    g1 = np.stack([l.gate for l in locs])
    f1 = np.stack([l.features for l in locs])
    g2 = np.stack([l.gate for l in locs2])
    f2 = np.stack([l.features for l in locs2])
    amps = np.array([p.amplitude for p in regimes])
    ells = np.array([p.lengthscale for p in regimes])
    shapes = (
        np.array([p.shape for p in regimes])
        if base == "rq"
        else None
    )
    return mix_gram(g1, f1, g2, f2, amps, ells, base=base, rq_shape=shapes)


def direct_sum_embed(loc: LocationRepr, regimes, base: str = "linear") -> np.ndarray:
    """Concatenation over regimes of g_r * a_r * z_r.

    Only the linear base kernel has a finite-dimensional feature map, so the
    embedding is defined for it alone; inner products of embeddings then
    reproduce mix_kernel exactly.
    """
    if base != "linear":
        raise UnsupportedConfigError(
            "direct-sum embedding requires the finite-dimensional linear base kernel"
        )
    if len(regimes) != loc.gate.shape[0]:
        raise InvalidArgumentError("number of regime params must match gate length")
    amps = np.array([p.amplitude for p in regimes])
    return (loc.gate[:, None] * amps[:, None] * loc.features).ravel()


# Vectorised / autodiff-compatible assembly ----------------------------------


def pairwise_sq_dists(a, b):
    """Squared distances between (..., N, d) and (..., M, d) rows.

    Expanded form with a clamp at 0 against tiny negative rounding.
    """
    a2 = ad.sum(a * a, axis=-1, keepdims=True)
    b2 = ad.sum(b * b, axis=-1, keepdims=True)
    cross = ad.matmul(a, ad.moveaxis(b, -1, -2))
    return ad.clip_min(a2 + ad.moveaxis(b2, -1, -2) - 2.0 * cross, 0.0)


def _expand_param(p, extra_dims=2):
    """Reshape (R,) kernel params to (R, 1, 1) for broadcasting over Grams."""
    r = ad.value(p).shape[0]
    return ad.reshape(p, (r,) + (1,) * extra_dims)


def base_gram(feats1, feats2, amplitudes, lengthscales, base="rbf", rq_shape=None):
    """Per-regime base-kernel Grams: (R, N, d), (R, M, d) -> (R, N, M)."""
    a2 = _expand_param(amplitudes * amplitudes)
    if base == "linear":
        return a2 * ad.matmul(feats1, ad.moveaxis(feats2, -1, -2))
    d2 = pairwise_sq_dists(feats1, feats2)
    ell2 = _expand_param(lengthscales * lengthscales)
    if base == "rbf":
        return a2 * ad.exp(-d2 / (2.0 * ell2))
    if base == "rq":
        if rq_shape is None:
            raise InvalidArgumentError("rq base kernel requires shape parameters")
        shape = _expand_param(rq_shape)
        # (1 + d2/(2 alpha l^2))^(-alpha) via exp/log so alpha may be a tensor
        return a2 * ad.exp(-shape * ad.log1p(d2 / (2.0 * shape * ell2)))
    raise InvalidArgumentError(f"unknown base kernel '{base}'")


def mix_gram(
    gates1, feats1, gates2, feats2, amplitudes, lengthscales, base="rbf", rq_shape=None
):
    """Mixing-kernel Gram: gates (N, R), features (N, R, d) -> (N, M).

    Accepts tensors or arrays; per-regime Grams are congruence-weighted by
    the gate values and summed over regimes.
    """
    f1 = ad.transpose(feats1, (1, 0, 2))
    f2 = ad.transpose(feats2, (1, 0, 2))
    kr = base_gram(f1, f2, amplitudes, lengthscales, base=base, rq_shape=rq_shape)
    n = ad.value(gates1).shape[0]
    m = ad.value(gates2).shape[0]
    r = ad.value(gates1).shape[1]
    w1 = ad.reshape(ad.transpose(gates1, (1, 0)), (r, n, 1))
    w2 = ad.reshape(ad.transpose(gates2, (1, 0)), (r, 1, m))
    return ad.sum(w1 * kr * w2, axis=0)


def mix_gram_diag(gates, feats, amplitudes, base="rbf"):
    """Diagonal of the mixing Gram at identical locations: (N,).

    For stationary bases (rbf, rq) K_r(z, z) = a_r^2; for the linear base it
    is a_r^2 ||z_r||^2.
    """
    if base == "linear":
        zz = ad.sum(feats * feats, axis=-1)
        return ad.sum(gates * gates * ad.reshape(amplitudes * amplitudes, (1, -1)) * zz, axis=-1)
    a2 = ad.reshape(amplitudes * amplitudes, (1, -1))
    return ad.sum(gates * gates * a2, axis=-1)


# PSD test utilities ----------------------------------------------------------


def min_relative_eigenvalue(mat: np.ndarray) -> float:
    """min eigenvalue divided by max(eigenvalue, tiny); PSD iff >= -tolerance."""
    eigs = np.linalg.eigvalsh(0.5 * (mat + mat.T))
    scale = max(float(eigs[-1]), np.finfo(float).tiny)
    return float(eigs[0]) / scale


def is_psd(mat: np.ndarray, rel_tol: float = 1e-8) -> bool:
    return min_relative_eigenvalue(mat) >= -rel_tol
