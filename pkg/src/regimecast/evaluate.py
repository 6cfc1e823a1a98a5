"""Forecast quality metrics, regime-recovery scoring, and diagnostics export.

Metrics follow one protocol for every head: the negative log predictive
density comes from the analytic (quadrature) density, the predictive mean
is analytic, and CRPS and coverage are estimated from a fixed-seed sample
ensemble so mixture and single-component heads are scored identically.
All metrics are means over (window, horizon, channel) locations in the
coordinates of the supplied window sets.

Regime recovery scores soft gate trajectories against oracle labels: hard
assignments are matched to labels by the best permutation (assignment
problem on the confusion matrix) and the soft gates are scored by their
mutual information with the labels.

``export_diagnostics`` writes the gate trajectories, the active-regime
parameter table, the residual-variance decomposition, and the
regime-conditional calibration as deterministic CSV files plus a summary
JSON; byte-for-byte reproducible for a fixed model, dataset, and seed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import gate
from . import likelihood as lik
from . import model
from .data import WindowSet
from .errors import InvalidArgumentError
from .util import format_float

DEFAULT_BATCH = 512
DEFAULT_CRPS_SAMPLES = 200
DEFAULT_SAMPLE_SEED = 1729
COVERAGE_LEVELS = (0.5, 0.9)

DIAGNOSTIC_FILES = ("gates.csv", "regimes.csv", "vres.csv", "calibration.csv")
REPORT_FILE = "report.json"


@dataclass(frozen=True)
class MetricReport:
    """Scalar forecast metrics plus the per-horizon-step breakdown."""

    nlpd: float
    crps: float
    mse: float
    coverage50: float
    coverage90: float
    horizon_nlpd: tuple[float, ...]
    horizon_mse: tuple[float, ...]

    def as_dict(self) -> dict:
        return {
            "nlpd": self.nlpd,
            "crps": self.crps,
            "mse": self.mse,
            "coverage50": self.coverage50,
            "coverage90": self.coverage90,
            "horizon_nlpd": list(self.horizon_nlpd),
            "horizon_mse": list(self.horizon_mse),
        }


@dataclass(frozen=True)
class RegimeRecovery:
    """Best-permutation hard accuracy and soft gate/label mutual information."""

    accuracy: float
    mutual_information: float


@dataclass(frozen=True)
class SeedAggregate:
    """Equal-weight mean and population spread of per-seed metric reports."""

    mean: MetricReport
    std: MetricReport
    n_seeds: int


def _check_set(window_set: WindowSet):
    if len(window_set) == 0:
        raise InvalidArgumentError("window set is empty")


def _iter_outputs(params, config, window_set: WindowSet, temperature, batch_size):
    _check_set(window_set)
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    inputs = np.asarray(window_set.inputs, dtype=float)
    targets = np.asarray(window_set.targets, dtype=float)
    for lo in range(0, inputs.shape[0], batch_size):
        hi = lo + batch_size
        out = model.forward(
            params, config, inputs[lo:hi], temperature=temperature, with_kl=False
        )
        yield out, targets[lo:hi]


def _concat_state(outputs):
    """Stack per-chunk predictive states along the window axis."""
    fields = {}
    for name in ("gate", "locs", "scales", "m_delta", "s_delta2"):
        fields[name] = np.concatenate(
            [np.asarray(ad.value(getattr(out.state, name))) for out in outputs]
        )
    nus = outputs[0].state.nus
    fields["nus"] = None if nus is None else np.asarray(ad.value(nus))
    state = lik.PredictiveState(**fields)
    scale = np.concatenate([np.asarray(out.stats.scale) for out in outputs])
    location = np.concatenate([np.asarray(out.stats.location) for out in outputs])
    return state, scale, location


def nlpd(params, config, window_set: WindowSet, temperature: float = 1.0,
         batch_size: int = DEFAULT_BATCH) -> float:
    """Mean per-location negative log predictive density."""
    total = 0.0
    count = 0
    for out, targets in _iter_outputs(params, config, window_set, temperature,
                                      batch_size):
        logp = ad.value(model.predictive_logdensity(targets, out, config))
        total -= float(logp.sum())
        count += logp.size
    return total / count


def mse(params, config, window_set: WindowSet, temperature: float = 1.0,
        batch_size: int = DEFAULT_BATCH) -> float:
    """Mean squared error of the analytic predictive mean."""
    total = 0.0
    count = 0
    for out, targets in _iter_outputs(params, config, window_set, temperature,
                                      batch_size):
        err = model.predictive_mean(out) - targets
        total += float(np.sum(err * err))
        count += err.size
    return total / count


def predictive_samples(params, config, window_set: WindowSet,
                       n_samples: int = DEFAULT_CRPS_SAMPLES,
                       temperature: float = 1.0,
                       batch_size: int = DEFAULT_BATCH,
                       seed: int = DEFAULT_SAMPLE_SEED) -> np.ndarray:
    """Fixed-seed predictive ensemble, shape (N, H, D, n_samples).

    The whole set is sampled from one stream after the batched forward
    passes, so the draw does not depend on the batch size.
    """
    outputs = [out for out, _ in _iter_outputs(params, config, window_set,
                                               temperature, batch_size)]
    state, scale, location = _concat_state(outputs)
    samples = lik.sample_predictive(state, n_samples, seed)
    return samples * scale[:, None, :, None] + location[:, None, :, None]


def crps_from_samples(samples: np.ndarray, targets: np.ndarray) -> float:
    """Unbiased sample CRPS, mean over locations.

    ``samples`` carries the ensemble on the last axis; the leading axes
    must match ``targets``.  Per location the estimator is
    ``mean|X - y| - 1/2 * mean|X - X'|`` with the self-pair excluded.
    """
    samples = np.asarray(samples, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if samples.shape[:-1] != targets.shape:
        raise InvalidArgumentError("sample and target shapes do not match")
    n = samples.shape[-1]
    if n < 2:
        raise InvalidArgumentError("CRPS needs at least 2 samples per location")
    term1 = np.mean(np.abs(samples - targets[..., None]), axis=-1)
    ordered = np.sort(samples, axis=-1)
    weights = 2.0 * np.arange(n) - (n - 1.0)
    pair_sum = 2.0 * np.sum(weights * ordered, axis=-1)
    term2 = pair_sum / (n * (n - 1.0))
    return float(np.mean(term1 - 0.5 * term2))


def coverage_from_samples(samples: np.ndarray, targets: np.ndarray,
                          level: float) -> float:
    """Fraction of targets inside the central sample interval at ``level``."""
    if not 0.0 < level < 1.0:
        raise InvalidArgumentError("coverage level must lie in (0, 1)")
    samples = np.asarray(samples, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if samples.shape[:-1] != targets.shape:
        raise InvalidArgumentError("sample and target shapes do not match")
    tail = 0.5 * (1.0 - level)
    lo = np.quantile(samples, tail, axis=-1)
    hi = np.quantile(samples, 1.0 - tail, axis=-1)
    return float(np.mean((targets >= lo) & (targets <= hi)))


def crps(params, config, window_set: WindowSet, temperature: float = 1.0,
         batch_size: int = DEFAULT_BATCH, n_samples: int = DEFAULT_CRPS_SAMPLES,
         seed: int = DEFAULT_SAMPLE_SEED) -> float:
    samples = predictive_samples(params, config, window_set, n_samples,
                                 temperature, batch_size, seed)
    return crps_from_samples(samples, window_set.targets)


def coverage(params, config, window_set: WindowSet, level: float,
             temperature: float = 1.0, batch_size: int = DEFAULT_BATCH,
             n_samples: int = DEFAULT_CRPS_SAMPLES,
             seed: int = DEFAULT_SAMPLE_SEED) -> float:
    samples = predictive_samples(params, config, window_set, n_samples,
                                 temperature, batch_size, seed)
    return coverage_from_samples(samples, window_set.targets, level)


def evaluate_model(params, config, window_set: WindowSet,
                   temperature: float = 1.0, batch_size: int = DEFAULT_BATCH,
                   n_samples: int = DEFAULT_CRPS_SAMPLES,
                   seed: int = DEFAULT_SAMPLE_SEED) -> MetricReport:
    """All metrics from one pass over the set, with per-horizon breakdowns."""
    outputs = []
    logp_rows = []
    mean_rows = []
    for out, targets in _iter_outputs(params, config, window_set, temperature,
                                      batch_size):
        outputs.append(out)
        logp_rows.append(np.asarray(
            ad.value(model.predictive_logdensity(targets, out, config))
        ))
        mean_rows.append(model.predictive_mean(out))
    logp = np.concatenate(logp_rows)  # (N, H, D)
    mean = np.concatenate(mean_rows)
    targets = np.asarray(window_set.targets, dtype=float)
    state, scale, location = _concat_state(outputs)
    samples = lik.sample_predictive(state, n_samples, seed)
    samples = samples * scale[:, None, :, None] + location[:, None, :, None]
    sq_err = (mean - targets) ** 2
    return MetricReport(
        nlpd=float(-logp.mean()),
        crps=crps_from_samples(samples, targets),
        mse=float(sq_err.mean()),
        coverage50=coverage_from_samples(samples, targets, 0.5),
        coverage90=coverage_from_samples(samples, targets, 0.9),
        horizon_nlpd=tuple(float(v) for v in -logp.mean(axis=(0, 2))),
        horizon_mse=tuple(float(v) for v in sq_err.mean(axis=(0, 2))),
    )


def gate_trajectories(params, config, window_set: WindowSet,
                      temperature: float = 1.0,
                      batch_size: int = DEFAULT_BATCH) -> np.ndarray:
    """Per-location gate weights, shape (N, H, D, R)."""
    rows = [np.asarray(ad.value(out.state.gate))
            for out, _ in _iter_outputs(params, config, window_set, temperature,
                                        batch_size)]
    return np.concatenate(rows)


def regime_recovery(gates: np.ndarray, labels: np.ndarray) -> RegimeRecovery:
    """Score soft gates against oracle labels.

    ``gates`` holds weight vectors on the last axis; ``labels`` matches the
    leading axes (integer regime ids).  Hard accuracy is the best label
    permutation of the argmax assignment; the soft score is the mutual
    information (nats) between the gate components and the labels.
    """
    gates = np.asarray(gates, dtype=float)
    labels = np.asarray(labels)
    if gates.shape[:-1] != labels.shape:
        raise InvalidArgumentError("gate and label shapes do not match")
    if gates.size == 0:
        raise InvalidArgumentError("no locations to score")
    r = gates.shape[-1]
    flat_gates = gates.reshape(-1, r)
    flat_labels = labels.reshape(-1)
    n = flat_labels.shape[0]
    classes, class_idx = np.unique(flat_labels, return_inverse=True)
    c = classes.shape[0]

    hard = np.argmax(flat_gates, axis=-1)
    confusion = np.zeros((r, c))
    np.add.at(confusion, (hard, class_idx), 1.0)
    rows, cols = linear_sum_assignment(-confusion)
    accuracy = float(confusion[rows, cols].sum() / n)

    joint = np.zeros((r, c))
    np.add.at(joint.T, class_idx, flat_gates)
    joint /= n
    pr = joint.sum(axis=1, keepdims=True)
    pc = joint.sum(axis=0, keepdims=True)
    mask = joint > 0
    mi = float(np.sum(joint[mask] * np.log(joint[mask] / (pr @ pc)[mask])))
    return RegimeRecovery(accuracy=accuracy, mutual_information=max(mi, 0.0))


def aggregate_seeds(reports) -> SeedAggregate:
    """Equal-weight mean and population std of metric reports across seeds."""
    reports = list(reports)
    if not reports:
        raise InvalidArgumentError("need at least one report to aggregate")
    horizons = {len(rep.horizon_nlpd) for rep in reports}
    if len(horizons) != 1 or {len(rep.horizon_mse) for rep in reports} != horizons:
        raise InvalidArgumentError("reports disagree on the horizon length")

    def stat(fn, field):
        # Sort before reducing so the result is independent of seed order.
        values = np.sort(np.asarray([getattr(rep, field) for rep in reports]), axis=0)
        if field.startswith("horizon_"):
            return tuple(float(v) for v in fn(values, axis=0))
        return float(fn(values))

    fields = ("nlpd", "crps", "mse", "coverage50", "coverage90",
              "horizon_nlpd", "horizon_mse")
    mean = MetricReport(**{f: stat(np.mean, f) for f in fields})
    std = MetricReport(**{f: stat(np.std, f) for f in fields})
    return SeedAggregate(mean=mean, std=std, n_seeds=len(reports))


# Diagnostics export ----------------------------------------------------------


def _fmt(value) -> str:
    return format_float(float(value))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def export_diagnostics(params, config, window_set: WindowSet, out_dir,
                       temperature: float = 1.0,
                       batch_size: int = DEFAULT_BATCH,
                       n_samples: int = DEFAULT_CRPS_SAMPLES,
                       seed: int = DEFAULT_SAMPLE_SEED) -> dict[str, Path]:
    """Write gate, regime, variance, and calibration diagnostics.

    Produces ``gates.csv`` (per-location gate trajectory and entropy),
    ``regimes.csv`` (parameter table over active regimes), ``vres.csv``
    (residual variance and the latent/observation variance ratio per
    location), ``calibration.csv`` (coverage conditioned on the dominant
    regime), and ``report.json`` (metrics plus gate summary).  Output is
    deterministic byte-for-byte for a fixed model, dataset, and seed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    logp_rows = []
    mean_rows = []
    vres_rows = []
    for out, targets in _iter_outputs(params, config, window_set, temperature,
                                      batch_size):
        outputs.append(out)
        logp_rows.append(np.asarray(
            ad.value(model.predictive_logdensity(targets, out, config))
        ))
        mean_rows.append(model.predictive_mean(out))
        vres_rows.append(np.asarray(ad.value(out.v_res)))
    state, scale, location = _concat_state(outputs)
    targets = np.asarray(window_set.targets, dtype=float)
    samples = lik.sample_predictive(state, n_samples, seed)
    samples = samples * scale[:, None, :, None] + location[:, None, :, None]
    logp = np.concatenate(logp_rows)
    mean = np.concatenate(mean_rows)
    v_res = np.concatenate(vres_rows)
    n, h, d = targets.shape
    r = state.gate.shape[-1]
    gates = np.broadcast_to(state.gate, (n, h, d, r))
    s_delta2 = np.broadcast_to(state.s_delta2, (n, h, d))
    scales = np.broadcast_to(state.scales, (n, h, d, r))
    pi_bar = gates.reshape(-1, r).mean(axis=0)
    r_eff = gate.effective_regimes(pi_bar)
    active = np.flatnonzero(pi_bar > gate.DEFAULT_ACTIVE_THRESHOLD)
    entropy = -np.sum(
        gates * np.log(np.clip(gates, gate.WEIGHT_FLOOR, None)), axis=-1
    )

    grid = [(w, step, ch) for w in range(n) for step in range(h) for ch in range(d)]
    _write_csv(
        out_dir / "gates.csv",
        ["window", "horizon", "channel", "entropy"] + [f"pi{k}" for k in range(r)],
        [
            [w, step, ch, _fmt(entropy[w, step, ch])]
            + [_fmt(gates[w, step, ch, k]) for k in range(r)]
            for w, step, ch in grid
        ],
    )

    taus = np.asarray(ad.value(lik.taus_from_weights(params["like.tau_weights"])))
    nus = state.nus
    has_gp = config.uses_gp
    amps = np.exp(params["kernel.log_amplitude"]) if has_gp else None
    ells = np.exp(params["kernel.log_lengthscale"]) if has_gp else None
    offsets = np.asarray(params["like.offsets"], dtype=float)
    _write_csv(
        out_dir / "regimes.csv",
        ["regime", "pi_bar", "offset", "tau", "nu", "amplitude", "lengthscale"],
        [
            [
                int(k),
                _fmt(pi_bar[k]),
                _fmt(offsets[k]),
                _fmt(taus[k]),
                "" if nus is None else _fmt(np.asarray(ad.value(nus))[k]),
                "" if amps is None else _fmt(amps[k]),
                "" if ells is None else _fmt(ells[k]),
            ]
            for k in active
        ],
    )

    rho = s_delta2[..., None] / (scales**2)
    _write_csv(
        out_dir / "vres.csv",
        ["window", "horizon", "channel", "v_res", "s_delta2"]
        + [f"rho{k}" for k in range(r)],
        [
            [w, step, ch, _fmt(v_res[w, step, ch]), _fmt(s_delta2[w, step, ch])]
            + [_fmt(rho[w, step, ch, k]) for k in range(r)]
            for w, step, ch in grid
        ],
    )

    dominant = np.argmax(gates, axis=-1)
    calibration_rows = []
    for k in range(r):
        mask = dominant == k
        count = int(mask.sum())
        if count == 0:
            continue
        for level in COVERAGE_LEVELS:
            cov = coverage_from_samples(samples[mask], targets[mask], level)
            calibration_rows.append([int(k), _fmt(level), count, _fmt(cov)])
    _write_csv(
        out_dir / "calibration.csv",
        ["regime", "level", "count", "coverage"],
        calibration_rows,
    )

    sq_err = (mean - targets) ** 2
    report = MetricReport(
        nlpd=float(-logp.mean()),
        crps=crps_from_samples(samples, targets),
        mse=float(sq_err.mean()),
        coverage50=coverage_from_samples(samples, targets, 0.5),
        coverage90=coverage_from_samples(samples, targets, 0.9),
        horizon_nlpd=tuple(float(v) for v in -logp.mean(axis=(0, 2))),
        horizon_mse=tuple(float(v) for v in sq_err.mean(axis=(0, 2))),
    )
    summary = {
        "gate_entropy": float(-np.sum(
            pi_bar * np.log(np.clip(pi_bar, gate.WEIGHT_FLOOR, None))
        )),
        "levels": list(COVERAGE_LEVELS),
        "metrics": report.as_dict(),
        "n_locations": int(n * h * d),
        "pi_bar": [float(v) for v in pi_bar],
        "r_eff": int(r_eff),
    }
    with open(out_dir / REPORT_FILE, "w", newline="") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
        handle.write("\n")
    files = dict.fromkeys(DIAGNOSTIC_FILES)
    for name in DIAGNOSTIC_FILES:
        files[name] = out_dir / name
    files[REPORT_FILE] = out_dir / REPORT_FILE
    return files
