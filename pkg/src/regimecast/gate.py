"""Deterministic stick-breaking gate over regimes.

Maps unconstrained logits to simplex weights, provides the changepoint and
softmax special cases, the Dirichlet-style simplex penalty, entropy
diagnostics/objectives, linear anneal schedules and the effective-regime
count.  All math routines accept plain arrays or autodiff tensors and are
vectorised over arbitrary leading batch dimensions (last axis = regimes).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special as _special

from . import autodiff as ad
from .errors import InvalidArgumentError

# Floor applied to gate weights before any log so penalties and entropies
# stay finite under sigmoid saturation.
WEIGHT_FLOOR = 1e-30

DEFAULT_ACTIVE_THRESHOLD = 1e-2


@dataclass(frozen=True)
class GateSchedule:
    """Linear anneal from start_value to end_value over anneal_epochs."""

    start_value: float
    end_value: float
    anneal_epochs: int

    def __post_init__(self):
        if int(self.anneal_epochs) < 1:
            raise InvalidArgumentError("anneal_epochs must be >= 1")


@dataclass(frozen=True)
class SimplexPenaltyParams:
    """Symmetric Dirichlet-style penalty: concentration alpha, weight lambda."""

    alpha: float
    weight: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise InvalidArgumentError("simplex penalty alpha must be > 0")
        if self.weight < 0:
            raise InvalidArgumentError("simplex penalty weight must be >= 0")


def _check_logits(logits, temperature):
    vals = ad.value(logits)
    if not np.all(np.isfinite(vals)):
        raise InvalidArgumentError("gate logits must be finite")
    if not (np.isscalar(temperature) or np.ndim(temperature) == 0):
        raise InvalidArgumentError("temperature must be scalar")
    if not float(temperature) > 0:
        raise InvalidArgumentError("temperature must be > 0")


def stick_break_log(logits, temperature=1.0):
    """Log gate weights (..., R) from logits (..., R-1).

    Break fractions are v_r = sigmoid(logit_r / T); weight r takes fraction
    v_r of the stick remaining after breaks 1..r-1 and the final regime keeps
    the remainder.  Computed fully in log space: log v = -softplus(-z),
    log(1-v) = -softplus(z), cumulative sums give the remaining stick.
    """
    _check_logits(logits, temperature)
    shape = ad.value(logits).shape
    if shape[-1] == 0:
        return np.zeros(shape[:-1] + (1,))
    z = logits / float(temperature)
    log_v = -ad.softplus(-z)
    log_1mv = ad.cumsum(-ad.softplus(z), axis=-1)
    lead = np.zeros(shape[:-1] + (1,))
    log_remain = ad.concatenate([lead, log_1mv[..., :-1]], axis=-1)
    return ad.concatenate([log_v + log_remain, log_1mv[..., -1:]], axis=-1)


def stick_break(logits, temperature=1.0):
    """Gate weights (..., R) on the open simplex from logits (..., R-1)."""
    return ad.exp(stick_break_log(logits, temperature))


def logits_from_weights(weights, temperature=1.0):
    """Inverse stick-breaking: recover logits (..., R-1) from interior weights.

    Uses logit(v_r) = log(pi_r / suffix_r) with suffix_r = sum_{j>r} pi_j,
    which avoids the cancellation of forming 1 - v_r directly.
    """
    w = ad.value(weights)
    if np.any(w <= 0) or np.any(w >= 1):
        raise InvalidArgumentError("weights must lie in the open simplex")
    suffix = np.flip(np.cumsum(np.flip(w, axis=-1), axis=-1), axis=-1)
    return float(temperature) * (np.log(w[..., :-1]) - np.log(suffix[..., 1:]))


def changepoint_gate(t, tau, beta):
    """Two-regime smooth changepoint gate: pi_1 = sigmoid(-beta (t - tau))."""
    z = -float(beta) * (np.asarray(t, dtype=float) - float(tau))
    if not np.all(np.isfinite(z)):
        raise InvalidArgumentError("changepoint gate arguments must be finite")
    p1 = ad.value(ad.sigmoid(z))
    return np.stack([p1, 1.0 - p1], axis=-1)


def softmax_gate(logits, temperature=1.0):
    """Temperature softmax over R logits (ablation gate)."""
    _check_logits(logits, temperature)
    z = logits / float(temperature)
    return ad.exp(z - ad.logsumexp(z, axis=-1, keepdims=True))


def padded_softmax_log(logits, temperature=1.0):
    """Log weights of the padded softmax gate, computed in log space."""
    vals = ad.value(logits)
    zeros = np.zeros(vals.shape[:-1] + (1,))
    padded = ad.concatenate([logits, zeros], axis=-1)
    _check_logits(padded, temperature)
    z = padded / float(temperature)
    return z - ad.logsumexp(z, axis=-1, keepdims=True)


def padded_softmax_gate(logits, temperature=1.0):
    """Softmax gate over (..., R-1) logits with the last logit pinned at 0.

    Keeps the same free-parameter count as stick-breaking so the two gate
    transforms are drop-in replacements for each other.
    """
    return ad.exp(padded_softmax_log(logits, temperature))


def _require_batch(weights):
    w = ad.value(weights)
    if w.size == 0:
        raise InvalidArgumentError("empty gate-weight batch")
    return w


def simplex_penalty(weights_batch, params: SimplexPenaltyParams):
    """Dirichlet(alpha 1_R) negative mean log density, scaled by the weight.

    weight * [ -(alpha-1) * mean_locations sum_r log pi_r
               + R log Gamma(alpha) - log Gamma(R alpha) ]
    """
    w = _require_batch(weights_batch)
    if np.any(w <= 0):
        raise InvalidArgumentError("gate weights must be strictly positive")
    if params.weight == 0.0:
        return 0.0 if not ad.is_tensor(weights_batch) else ad.tensor(0.0)
    log_pi = ad.log(ad.clip_min(weights_batch, WEIGHT_FLOOR))
    return simplex_penalty_from_log(log_pi, params)


def simplex_penalty_from_log(log_weights_batch, params: SimplexPenaltyParams):
    """Penalty evaluated from log weights directly (training path)."""
    r = ad.value(log_weights_batch).shape[-1]
    data = ad.mean(ad.sum(log_weights_batch, axis=-1))
    return simplex_penalty_from_mean(data, r, params)


def simplex_penalty_from_mean(mean_joint_log, r: int, params: SimplexPenaltyParams):
    """Penalty from the location-mean of sum_r log pi_r (additive statistic)."""
    const = r * _special.gammaln(params.alpha) - _special.gammaln(r * params.alpha)
    return params.weight * (-(params.alpha - 1.0) * mean_joint_log + const)


def batch_entropy(weights_batch):
    """Entropy of the batch-and-horizon mean gate."""
    _require_batch(weights_batch)
    w = weights_batch
    while ad.value(w).ndim > 1:
        w = ad.mean(w, axis=0)
    return -ad.sum(w * ad.log(ad.clip_min(w, WEIGHT_FLOOR)))


def point_entropy(weights_batch):
    """Mean over locations of the per-location gate entropy."""
    _require_batch(weights_batch)
    ent = -ad.sum(
        weights_batch * ad.log(ad.clip_min(weights_batch, WEIGHT_FLOOR)), axis=-1
    )
    return ad.mean(ent)


def entropy_objective(weights_batch, lambda_batch, lambda_point):
    """-lambda_batch * H_batch + lambda_point * H_point (minimised)."""
    return -lambda_batch * batch_entropy(weights_batch) + lambda_point * point_entropy(
        weights_batch
    )


def effective_regimes(mean_weights, threshold=DEFAULT_ACTIVE_THRESHOLD) -> int:
    """Number of regimes whose mean gate mass exceeds the threshold."""
    if not 0.0 < threshold < 1.0:
        raise InvalidArgumentError("threshold must lie in (0, 1)")
    return int(np.sum(ad.value(mean_weights) > threshold))


def mean_gate(weights_batch):
    """Batch-and-horizon mean gate vector (plain numpy)."""
    w = np.asarray(ad.value(weights_batch))
    return w.reshape(-1, w.shape[-1]).mean(axis=0)


def schedule_value(schedule: GateSchedule, epoch: int) -> float:
    """Piecewise-linear anneal value at an epoch, clamped after the ramp."""
    if epoch < 0:
        raise InvalidArgumentError("epoch must be >= 0")
    frac = min(float(epoch) / float(schedule.anneal_epochs), 1.0)
    return schedule.start_value + (schedule.end_value - schedule.start_value) * frac
