"""Synthetic regime-switching series, windowing, splits, and scaling.

The generator produces series whose regimes differ in noise scale and tail
weight while sharing a deterministic mean process, together with the
ground-truth regime label at every step — the oracle that regime-recovery
scoring is measured against.  Windowing follows chronological splits where
validation immediately precedes test and lookbacks may reach into the
previous split but targets never do.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError
from .util import derive_rng, format_float

SCALE_FLOOR = 1e-6


@dataclass(frozen=True)
class RegimeSpec:
    """One regime: shared-mean sinusoid/drift plus its noise distribution."""

    noise_scale: float
    tail_df: float
    sin_amplitude: float = 0.0
    sin_period: float = 24.0
    drift: float = 0.0

    def __post_init__(self):
        if not self.noise_scale > 0:
            raise InvalidArgumentError("noise_scale must be > 0")
        if not self.tail_df > 2:
            raise InvalidArgumentError("tail_df must be > 2")
        if not self.sin_period > 0:
            raise InvalidArgumentError("sin_period must be > 0")

    def mean_process(self, t: np.ndarray) -> np.ndarray:
        return self.sin_amplitude * np.sin(2.0 * np.pi * t / self.sin_period) + (
            self.drift * t
        )


@dataclass(frozen=True)
class AbruptSwitching:
    """Fixed change times; regime k is active on [times[k-1], times[k])."""

    change_times: tuple[int, ...]

    def __post_init__(self):
        times = np.asarray(self.change_times)
        if times.size and np.any(np.diff(times) <= 0):
            raise InvalidArgumentError("change times must be strictly increasing")
        if times.size and times[0] <= 0:
            raise InvalidArgumentError("change times must be positive")


@dataclass(frozen=True)
class MarkovSwitching:
    """Row-stochastic transition matrix over the regime ids."""

    transition: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.transition, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise InvalidArgumentError("transition matrix must be square")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidArgumentError("transition rows must be probabilities")


@dataclass(frozen=True)
class GradualSwitching:
    """Logistic blend between exactly two regimes around one change time."""

    change_time: int
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidArgumentError("blend width must be > 0")


@dataclass(frozen=True)
class SynthSpec:
    length: int
    channels: int
    regimes: tuple[RegimeSpec, ...]
    switching: AbruptSwitching | MarkovSwitching | GradualSwitching
    seed: int = 0

    def __post_init__(self):
        if self.length < 1 or self.channels < 1:
            raise InvalidArgumentError("length and channels must be >= 1")
        if not self.regimes:
            raise InvalidArgumentError("at least one regime required")
        r = len(self.regimes)
        sw = self.switching
        if isinstance(sw, AbruptSwitching):
            if len(sw.change_times) != r - 1:
                raise InvalidArgumentError(
                    "abrupt switching needs exactly n_regimes - 1 change times"
                )
            if sw.change_times and sw.change_times[-1] >= self.length:
                raise InvalidArgumentError("change times must lie inside the series")
        elif isinstance(sw, MarkovSwitching):
            if np.asarray(sw.transition).shape[0] != r:
                raise InvalidArgumentError("transition matrix size must match regimes")
        elif isinstance(sw, GradualSwitching):
            if r != 2:
                raise InvalidArgumentError("gradual switching requires exactly 2 regimes")
            if not 0 < sw.change_time < self.length:
                raise InvalidArgumentError("change time must lie inside the series")
        else:
            raise InvalidArgumentError("unknown switching kind")


@dataclass(frozen=True)
class LabeledSeries:
    """Generated values with the oracle regime id per step."""

    values: np.ndarray  # (T, D)
    labels: np.ndarray  # (T,) ints
    blend: np.ndarray | None = None  # (T,) gradual-mix weight, where applicable

    def __post_init__(self):
        if self.values.ndim != 2:
            raise InvalidArgumentError("values must be (T, D)")
        if self.labels.shape != (self.values.shape[0],):
            raise InvalidArgumentError("labels must be (T,)")
        if np.any(self.labels < 0):
            raise InvalidArgumentError("labels must be non-negative regime ids")


def _regime_labels(spec: SynthSpec) -> tuple[np.ndarray, np.ndarray | None]:
    t = np.arange(spec.length)
    sw = spec.switching
    if isinstance(sw, AbruptSwitching):
        return np.searchsorted(np.asarray(sw.change_times), t, side="right"), None
    if isinstance(sw, MarkovSwitching):
        p = np.asarray(sw.transition, dtype=float)
        rng = derive_rng(spec.seed, "markov-chain")
        labels = np.zeros(spec.length, dtype=int)
        uniforms = rng.random(spec.length)
        cum = np.cumsum(p, axis=1)
        for i in range(1, spec.length):
            labels[i] = int(np.searchsorted(cum[labels[i - 1]], uniforms[i]))
        return labels, None
    blend = 1.0 / (1.0 + np.exp(-(t - sw.change_time) / sw.width))
    return (blend > 0.5).astype(int), blend


def synth_generate(spec: SynthSpec) -> LabeledSeries:
    """Mean process plus regime-dependent Student-t noise, seeded."""
    t = np.arange(spec.length, dtype=float)
    labels, blend = _regime_labels(spec)
    rng = derive_rng(spec.seed, "noise")
    # Draw a full panel per regime in a fixed order, then select by label,
    # so changing one regime's scale cannot shift any other regime's draws.
    draws = np.stack(
        [
            reg.noise_scale * rng.standard_t(reg.tail_df, size=(spec.length, spec.channels))
            for reg in spec.regimes
        ]
    )
    means = np.stack([reg.mean_process(t) for reg in spec.regimes])
    if blend is None:
        noise = draws[labels, np.arange(spec.length)]
        mean = means[labels, np.arange(spec.length)]
    else:
        w = blend[:, None]
        noise = (1.0 - w) * draws[0] + w * draws[1]
        mean = (1.0 - blend) * means[0] + blend * means[1]
    return LabeledSeries(values=mean[:, None] + noise, labels=labels, blend=blend)


@dataclass(frozen=True)
class SplitSpec:
    """Chronological split geometry: lookback, horizon, and fractions."""

    lookback: int = 336
    horizon: int = 24
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.lookback < 1 or self.horizon < 1:
            raise InvalidArgumentError("lookback and horizon must be >= 1")
        for frac in (self.val_fraction, self.test_fraction):
            if not 0.0 < frac < 1.0:
                raise InvalidArgumentError("fractions must lie in (0, 1)")
        if self.val_fraction + self.test_fraction >= 1.0:
            raise InvalidArgumentError("fractions must sum to < 1")


@dataclass(frozen=True)
class WindowSet:
    """Batched sliding windows: inputs, targets, and oracle labels."""

    inputs: np.ndarray  # (N, L, D)
    targets: np.ndarray  # (N, H, D)
    labels: np.ndarray | None  # (N, H) oracle regime ids, when available
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return self.inputs.shape[0]


def sliding_windows(values: np.ndarray, lookback: int, horizon: int):
    """All stride-1 windows: returns (starts, inputs, targets)."""
    t = values.shape[0]
    if t < lookback + horizon:
        raise InvalidArgumentError("series shorter than lookback + horizon")
    n = t - lookback - horizon + 1
    starts = np.arange(n)
    inputs = np.stack([values[s : s + lookback] for s in starts])
    targets = np.stack([values[s + lookback : s + lookback + horizon] for s in starts])
    return starts, inputs, targets


def split_boundaries(t: int, split: SplitSpec) -> tuple[int, int]:
    """(val_start, test_start) indices of the chronological split."""
    test_start = int(np.floor(t * (1.0 - split.test_fraction)))
    val_start = int(np.floor(t * (1.0 - split.test_fraction - split.val_fraction)))
    return val_start, test_start


def make_windows(series: LabeledSeries, split: SplitSpec):
    """Chronological (train, val, test) window sets.

    A window belongs to the split that contains its entire target block;
    lookbacks may reach back across the boundary (initialisation overlap
    only), and windows whose targets straddle a boundary are dropped.
    """
    values = np.asarray(series.values, dtype=float)
    t = values.shape[0]
    starts, inputs, targets = sliding_windows(values, split.lookback, split.horizon)
    label_windows = np.stack(
        [
            series.labels[s + split.lookback : s + split.lookback + split.horizon]
            for s in starts
        ]
    )
    val_start, test_start = split_boundaries(t, split)
    tgt_first = starts + split.lookback
    tgt_last = tgt_first + split.horizon - 1

    def subset(mask):
        return WindowSet(
            inputs=inputs[mask],
            targets=targets[mask],
            labels=label_windows[mask],
            starts=starts[mask],
        )

    train = subset(tgt_last < val_start)
    val = subset((tgt_first >= val_start) & (tgt_last < test_start))
    test = subset(tgt_first >= test_start)
    return train, val, test


@dataclass(frozen=True)
class Scaler:
    """Per-channel affine map fitted on the training split only."""

    mean: np.ndarray  # (D,)
    scale: np.ndarray  # (D,)

    def transform(self, values):
        return (values - self.mean) / self.scale

    def inverse(self, values):
        return values * self.scale + self.mean


def fit_scaler(values: np.ndarray) -> Scaler:
    flat = values.reshape(-1, values.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    if np.any(std < SCALE_FLOOR):
        warnings.warn("zero-variance channel: scale floored", RuntimeWarning)
        std = np.maximum(std, SCALE_FLOOR)
    return Scaler(mean=mean, scale=std)


def standard_scale(train: WindowSet, val: WindowSet, test: WindowSet):
    """Scale all three sets by train-set statistics; returns sets + scaler."""
    if len(train) == 0:
        raise InvalidArgumentError("train split is empty")
    stacked = np.concatenate(
        [train.inputs.reshape(-1, train.inputs.shape[-1]),
         train.targets.reshape(-1, train.targets.shape[-1])]
    )
    scaler = fit_scaler(stacked)

    def apply(ws: WindowSet) -> WindowSet:
        return WindowSet(
            inputs=scaler.transform(ws.inputs),
            targets=scaler.transform(ws.targets),
            labels=ws.labels,
            starts=ws.starts,
        )

    return apply(train), apply(val), apply(test), scaler


def write_labeled_csv(series: LabeledSeries, path) -> None:
    """timestamp, one column per channel, regime_label; full float precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        d = series.values.shape[1]
        writer.writerow(["timestamp"] + [f"ch{i}" for i in range(d)] + ["regime_label"])
        for idx in range(series.values.shape[0]):
            row = [str(idx)]
            row += [format_float(v) for v in series.values[idx]]
            row.append(str(int(series.labels[idx])))
            writer.writerow(row)


def read_labeled_csv(path) -> LabeledSeries:
    """Inverse of write_labeled_csv."""
    values, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "timestamp" or header[-1] != "regime_label":
            raise InvalidArgumentError("not a labeled-series CSV")
        for row in reader:
            values.append([float(x) for x in row[1:-1]])
            labels.append(int(row[-1]))
    return LabeledSeries(values=np.asarray(values), labels=np.asarray(labels, dtype=int))


def ingest_csv(path, max_gap_factor: float | None = None) -> np.ndarray:
    """Parse an external CSV: timestamp column first, numeric channels after.

    Rows are sorted by timestamp; duplicate timestamps, NaN cells, and (when
    a tolerance is configured) gaps larger than max_gap_factor times the
    median step are hard errors.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise InvalidArgumentError(f"cannot open {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise InvalidArgumentError("CSV needs a header with timestamp + channels")
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise InvalidArgumentError(f"row {lineno}: expected {len(header)} cells")
            stamps.append(_parse_timestamp(row[0], lineno))
            parsed = []
            for col, cell in zip(header[1:], row[1:]):
                try:
                    x = float(cell)
                except ValueError as exc:
                    raise InvalidArgumentError(
                        f"row {lineno}, column {col}: not numeric: {cell!r}"
                    ) from exc
                if np.isnan(x):
                    raise InvalidArgumentError(f"row {lineno}, column {col}: NaN cell")
                parsed.append(x)
            rows.append(parsed)
    if not rows:
        raise InvalidArgumentError("CSV contains no data rows")
    stamps = np.asarray(stamps)
    order = np.argsort(stamps, kind="stable")
    stamps = stamps[order]
    if np.any(np.diff(stamps) == 0):
        raise InvalidArgumentError("duplicate timestamps")
    if max_gap_factor is not None and len(stamps) > 2:
        diffs = np.diff(stamps)
        if np.any(diffs > max_gap_factor * np.median(diffs)):
            raise InvalidArgumentError("timestamp gap exceeds configured tolerance")
    return np.asarray(rows, dtype=float)[order]


def _parse_timestamp(cell: str, lineno: int) -> float:
    try:
        return float(cell)
    except ValueError:
        pass
    try:
        return np.datetime64(cell).astype("datetime64[s]").astype(float)
    except ValueError as exc:
        raise InvalidArgumentError(
            f"row {lineno}: cannot parse timestamp {cell!r}"
        ) from exc