"""Objective assembly, gradient verification, and the optimisation loop.

The training objective on a minibatch is the full-dataset-equivalent
negative evidence bound plus deterministic gate-shaping terms:

    (N / |B|) * sum_B data_term  -  KL   ->  negated, then
    + simplex penalty on the post-temperature gate weights
    + entropy shaping (-lambda_batch * H_batch + lambda_point * H_point)

The data term is scaled up to the dataset size while the KL appears once,
so the mean of minibatch objectives over an even partition equals the
full-batch objective exactly.  Temperature, simplex concentration, and the
batch-entropy weight follow linear per-epoch schedules.

Gradients come from the reverse-mode tape in :mod:`regimecast.autodiff`
and are verified against central finite differences by :func:`grad_check`.
Optimisation is plain adaptive-moment descent with early stopping on the
mean validation negative log predictive density.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import gate
from . import model
from .data import WindowSet
from .errors import InvalidArgumentError, InvalidConfigError, NumericalError
from .util import derive_rng

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

DEFAULT_TEMPERATURE = gate.GateSchedule(1.0, 0.2, 50)
DEFAULT_SIMPLEX_ALPHA = gate.GateSchedule(2.0, 0.9, 50)
DEFAULT_LAMBDA_BATCH = gate.GateSchedule(3e-4, 1e-6, 50)
DEFAULT_LAMBDA_SIMPLEX = 1e-3

# Operating point for the encoder-only heads (no GP, no gate curriculum to
# wait out): smaller batches and no minimum epoch count.
ENCODER_ONLY_BATCH = 128


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation hyperparameters around a model configuration."""

    model: model.ModelConfig
    batch_size: int = 512
    learning_rate: float = 1e-4
    max_epochs: int = 500
    min_epochs: int = 50
    patience: int = 50
    temperature: gate.GateSchedule = DEFAULT_TEMPERATURE
    simplex_alpha: gate.GateSchedule = DEFAULT_SIMPLEX_ALPHA
    lambda_batch: gate.GateSchedule = DEFAULT_LAMBDA_BATCH
    lambda_point: float = 0.0
    lambda_simplex: float = DEFAULT_LAMBDA_SIMPLEX
    micro_batch: int | None = None
    seed: int = 42

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidConfigError("learning_rate must be > 0")
        if self.max_epochs < 0:
            raise InvalidConfigError("max_epochs must be >= 0")
        if self.min_epochs < 0:
            raise InvalidConfigError("min_epochs must be >= 0")
        if self.patience < 1:
            raise InvalidConfigError("patience must be >= 1")
        if self.lambda_point < 0 or self.lambda_simplex < 0:
            raise InvalidConfigError("penalty weights must be >= 0")
        if self.micro_batch is not None and self.micro_batch < 1:
            raise InvalidConfigError("micro_batch must be >= 1 when set")


def default_train_config(model_config: model.ModelConfig, seed: int = 42) -> TrainConfig:
    """Reference operating point; lighter loop for encoder-only heads."""
    if model_config.uses_gp:
        return TrainConfig(model=model_config, seed=seed)
    return TrainConfig(
        model=model_config, batch_size=ENCODER_ONLY_BATCH, min_epochs=0, seed=seed
    )


@dataclass(frozen=True)
class BatchDiagnostics:
    """Plain-number breakdown of one minibatch objective."""

    objective: float
    elbo: float
    kl: float
    penalty_simplex: float
    penalty_entropy: float
    gate_sum: np.ndarray  # (R,) location-sum of post-temperature weights
    locations: int


@dataclass
class AdamState:
    """First/second moment accumulators, keyed like the parameter dict."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


@dataclass
class TrainState:
    """Everything the loop mutates: parameters, progress, and moments."""

    params: dict[str, np.ndarray]
    opt: AdamState
    epoch: int = 0
    best_val: float = np.inf
    best_epoch: int = -1
    best_params: dict[str, np.ndarray] = field(default_factory=dict)


HISTORY_FIELDS = (
    "epoch",
    "objective",
    "elbo",
    "kl",
    "penalty_simplex",
    "penalty_entropy",
    "gate_entropy",
    "r_eff",
    "temperature",
    "val_nlpd",
)


@dataclass(frozen=True)
class EpochRecord:
    """One training epoch: objective breakdown and gate diagnostics."""

    epoch: int
    objective: float
    elbo: float
    kl: float
    penalty_simplex: float
    penalty_entropy: float
    gate_entropy: float
    r_eff: int
    temperature: float
    val_nlpd: float

    def as_row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in HISTORY_FIELDS}


@dataclass(frozen=True)
class TrainResult:
    """Final state, per-epoch history, and how the loop ended."""

    state: TrainState
    history: list[EpochRecord]
    stopped_early: bool = False
    failure: str | None = None


def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {key: np.array(ad.value(value), copy=True) for key, value in params.items()}


def _chunks(windows, targets, micro):
    n = windows.shape[0]
    if micro is None or micro >= n:
        yield windows, targets
        return
    for lo in range(0, n, micro):
        yield windows[lo : lo + micro], targets[lo : lo + micro]


def _check_batch(config: TrainConfig, windows, targets):
    windows = np.asarray(ad.value(windows))
    targets = np.asarray(ad.value(targets))
    if windows.ndim != 3 or targets.ndim != 3:
        raise InvalidArgumentError("batch must be (B, L, D) windows, (B, H, D) targets")
    if windows.shape[0] == 0:
        raise InvalidArgumentError("batch must be nonempty")
    if windows.shape[0] != targets.shape[0]:
        raise InvalidArgumentError("windows and targets disagree on batch size")
    mcfg = config.model
    if windows.shape[1:] != (mcfg.lookback, mcfg.channels):
        raise InvalidArgumentError("window shape does not match the model config")
    if targets.shape[1:] != (mcfg.horizon, mcfg.channels):
        raise InvalidArgumentError("target shape does not match the model config")
    return windows, targets


def _chunk_stats(params, config: TrainConfig, windows, targets, temperature, with_kl):
    """Additive objective statistics for one chunk of a batch."""
    out = model.forward(
        params, config.model, windows, temperature=temperature, with_kl=with_kl
    )
    data_sum = ad.sum(model.data_logdensity(targets, out, config.model))
    weights = out.state.gate
    wval = ad.value(weights)
    r = wval.shape[-1]
    n_loc = int(wval.size // r)
    gate_sum = ad.sum(ad.reshape(weights, (n_loc, r)), axis=0)
    logpi_sum = ad.sum(out.log_gate)
    point_ent_sum = -ad.sum(
        weights * ad.log(ad.clip_min(weights, gate.WEIGHT_FLOOR))
    )
    return data_sum, gate_sum, logpi_sum, point_ent_sum, out.kl, n_loc, r


def _assemble(config: TrainConfig, epoch, scale, data_sum, kl, gate_sum,
              logpi_sum, point_ent_sum, n_loc, r):
    """Objective and diagnostics from (possibly accumulated) statistics."""
    alpha = gate.schedule_value(config.simplex_alpha, epoch)
    lam_batch = gate.schedule_value(config.lambda_batch, epoch)
    pen_simplex = gate.simplex_penalty_from_mean(
        logpi_sum / float(n_loc), r,
        gate.SimplexPenaltyParams(alpha, config.lambda_simplex),
    )
    gate_mean = gate_sum / float(n_loc)
    h_batch = -ad.sum(gate_mean * ad.log(ad.clip_min(gate_mean, gate.WEIGHT_FLOOR)))
    pen_entropy = -lam_batch * h_batch + config.lambda_point * point_ent_sum / float(n_loc)
    elbo = scale * data_sum - kl
    objective = -elbo + pen_simplex + pen_entropy
    diag = BatchDiagnostics(
        objective=float(ad.value(objective)),
        elbo=float(ad.value(elbo)),
        kl=float(ad.value(kl)),
        penalty_simplex=float(ad.value(pen_simplex)),
        penalty_entropy=float(ad.value(pen_entropy)),
        gate_sum=np.array(ad.value(gate_sum), copy=True),
        locations=n_loc,
    )
    return objective, diag


def _objective(params, config: TrainConfig, windows, targets, epoch, n_total):
    windows, targets = _check_batch(config, windows, targets)
    t_val = gate.schedule_value(config.temperature, epoch)
    scale = float(n_total if n_total is not None else windows.shape[0])
    scale /= float(windows.shape[0])
    data_sum, gate_sum, logpi_sum, pent_sum, kl, n_loc, r = _chunk_stats(
        params, config, windows, targets, t_val, with_kl=True
    )
    return _assemble(
        config, epoch, scale, data_sum, kl, gate_sum, logpi_sum, pent_sum, n_loc, r
    )


def total_objective(params, config: TrainConfig, windows, targets, epoch: int,
                    n_total: int | None = None):
    """Scalar minibatch objective (a Tensor when params are leaf tensors).

    ``n_total`` is the dataset size behind the ``N/|B|`` data-term scaling;
    it defaults to the batch size (pure minibatch bound).  Schedules are
    evaluated at ``epoch``.
    """
    return _objective(params, config, windows, targets, epoch, n_total)[0]


def objective_gradients(params, config: TrainConfig, windows, targets, epoch: int,
                        n_total: int | None = None):
    """(value, gradient dict, diagnostics) of the minibatch objective.

    With ``config.micro_batch`` set, the batch streams through separate
    graphs chunk by chunk and the results are mathematically identical to
    the full-batch evaluation: every statistic entering the objective is
    additive across chunks except the batch entropy, whose mean gate is
    rebuilt per chunk with the other chunks' gate sums frozen at their
    forward values, so each chunk contributes its exact partial gradient.
    """
    windows, targets = _check_batch(config, windows, targets)
    n = windows.shape[0]
    micro = config.micro_batch
    if micro is None or micro >= n:
        leaves = {k: ad.tensor(ad.value(v)) for k, v in params.items()}
        objective, diag = _objective(leaves, config, windows, targets, epoch, n_total)
        ad.backward(objective)
        grads = {k: ad.grad_of(t) for k, t in leaves.items()}
        return float(ad.value(objective)), grads, diag

    plain = {k: np.asarray(ad.value(v)) for k, v in params.items()}
    t_val = gate.schedule_value(config.temperature, epoch)
    scale = float(n_total if n_total is not None else n) / float(n)
    alpha = gate.schedule_value(config.simplex_alpha, epoch)
    lam_batch = gate.schedule_value(config.lambda_batch, epoch)

    stats = [
        _chunk_stats(plain, config, w, y, t_val, with_kl=(i == 0))
        for i, (w, y) in enumerate(_chunks(windows, targets, micro))
    ]
    n_loc = sum(s[5] for s in stats)
    r = stats[0][6]
    gate_total = np.sum([s[1] for s in stats], axis=0)
    _, diag = _assemble(
        config, epoch, scale,
        sum(s[0] for s in stats), stats[0][4], gate_total,
        sum(s[2] for s in stats), sum(s[3] for s in stats), n_loc, r,
    )

    leaves = {k: ad.tensor(v) for k, v in plain.items()}
    for i, (w, y) in enumerate(_chunks(windows, targets, micro)):
        data_i, gate_i, logpi_i, pent_i, kl_i, _, _ = _chunk_stats(
            leaves, config, w, y, t_val, with_kl=(i == 0)
        )
        frozen = gate_total - ad.value(gate_i)
        gate_mean = (gate_i + frozen) / float(n_loc)
        h_batch = -ad.sum(
            gate_mean * ad.log(ad.clip_min(gate_mean, gate.WEIGHT_FLOOR))
        )
        piece = -(scale * data_i - kl_i)
        piece = piece - config.lambda_simplex * (alpha - 1.0) * logpi_i / float(n_loc)
        piece = piece - lam_batch * h_batch
        piece = piece + config.lambda_point * pent_i / float(n_loc)
        ad.backward(piece)
    grads = {k: ad.grad_of(t) for k, t in leaves.items()}
    return diag.objective, grads, diag


# Finite-difference verification ---------------------------------------------


def finite_difference(fn, params: dict, key: str, epsilon: float = 1e-5):
    """Central-difference gradient of ``fn(params)`` w.r.t. ``params[key]``."""
    work = copy_params(params)
    base = work[key]
    out = np.zeros_like(base, dtype=float)
    for idx in np.ndindex(base.shape):
        orig = base[idx]
        base[idx] = orig + epsilon
        hi = float(ad.value(fn(work)))
        base[idx] = orig - epsilon
        lo = float(ad.value(fn(work)))
        base[idx] = orig
        out[idx] = (hi - lo) / (2.0 * epsilon)
    return out


def grad_check_groups(params, config: TrainConfig, windows, targets,
                      epoch: int = 0, n_total: int | None = None,
                      epsilon: float = 1e-5) -> dict[str, float]:
    """Per-group relative error of tape gradients vs central differences.

    The error for a group is ``max|grad - fd| / max(max|fd|, 1)``; empty
    groups report 0.  Intended for tiny configurations (cost is two
    objective evaluations per scalar parameter).
    """
    _, grads, _ = objective_gradients(params, config, windows, targets, epoch, n_total)

    def fn(p):
        return total_objective(p, config, windows, targets, epoch, n_total)

    report: dict[str, float] = {}
    for key in sorted(params):
        size = np.asarray(ad.value(params[key])).size
        if size == 0:
            report[key] = 0.0
            continue
        fd = finite_difference(fn, params, key, epsilon)
        denom = max(float(np.max(np.abs(fd))), 1.0)
        report[key] = float(np.max(np.abs(grads[key] - fd)) / denom)
    return report


def grad_check(params, config: TrainConfig, windows, targets, epoch: int = 0,
               n_total: int | None = None, epsilon: float = 1e-5) -> float:
    """Worst relative gradient error across all parameter groups."""
    groups = grad_check_groups(params, config, windows, targets, epoch, n_total, epsilon)
    return max(groups.values())


# Optimiser -------------------------------------------------------------------


def adam_init(params: dict[str, np.ndarray]) -> AdamState:
    def zeros():
        return {k: np.zeros_like(ad.value(v)) for k, v in params.items()}

    return AdamState(m=zeros(), v=zeros(), step=0)


def adam_step(params, grads, opt: AdamState, learning_rate: float):
    """One adaptive-moment update; returns new params, advances ``opt``."""
    opt.step += 1
    t = opt.step
    out = {}
    for key in sorted(params):
        g = np.asarray(grads[key], dtype=float)
        opt.m[key] = ADAM_BETA1 * opt.m[key] + (1.0 - ADAM_BETA1) * g
        opt.v[key] = ADAM_BETA2 * opt.v[key] + (1.0 - ADAM_BETA2) * g * g
        m_hat = opt.m[key] / (1.0 - ADAM_BETA1**t)
        v_hat = opt.v[key] / (1.0 - ADAM_BETA2**t)
        out[key] = ad.value(params[key]) - learning_rate * m_hat / (
            np.sqrt(v_hat) + ADAM_EPS
        )
    return out


# Training loop ---------------------------------------------------------------


def _inducing_feature_init(params, config: TrainConfig, inputs: np.ndarray):
    """Feature coordinates of M random training forecast locations."""
    mcfg = config.model
    m = mcfg.n_inducing
    rng = derive_rng(config.seed, "inducing", "locations")
    n, h, d = inputs.shape[0], mcfg.horizon, mcfg.channels
    widx = rng.integers(0, n, size=m)
    hidx = rng.integers(0, h, size=m)
    didx = rng.integers(0, d, size=m)
    uniq, inverse = np.unique(widx, return_inverse=True)
    normalized, _ = enc.normalize_windows(inputs[uniq])
    heads = enc.forward(normalized, params, mcfg.encoder_shape)
    feats = ad.value(heads.features)  # (U, H, D, R, d_g)
    return np.array(feats[inverse, hidx, didx], copy=True)


def initial_state(config: TrainConfig, train_set: WindowSet | None = None) -> TrainState:
    """Seeded parameters (inducing features drawn from training encodings)."""
    params = model.init_params(config.model, config.seed)
    if config.model.uses_gp and train_set is not None and len(train_set) > 0:
        params["inducing.features"] = _inducing_feature_init(
            params, config, np.asarray(train_set.inputs, dtype=float)
        )
    return TrainState(
        params=params,
        opt=adam_init(params),
        epoch=0,
        best_val=np.inf,
        best_epoch=-1,
        best_params=copy_params(params),
    )


def validation_nlpd(params, config: TrainConfig, window_set: WindowSet,
                    epoch: int) -> float:
    """Mean per-location negative log predictive density over a window set."""
    if len(window_set) == 0:
        raise InvalidArgumentError("validation split is empty")
    t_val = gate.schedule_value(config.temperature, epoch)
    total = 0.0
    count = 0
    for w, y in _chunks(window_set.inputs, window_set.targets, config.batch_size):
        out = model.forward(params, config.model, w, temperature=t_val, with_kl=False)
        logp = ad.value(model.predictive_logdensity(y, out, config.model))
        total -= float(logp.sum())
        count += logp.size
    return total / count


def train(config: TrainConfig, train_set: WindowSet, val_set: WindowSet,
          state: TrainState | None = None) -> TrainResult:
    """Optimise from a seeded init; select the best-validation checkpoint.

    Validation NLPD is computed after every epoch at that epoch's gate
    temperature.  Patience counts epochs since the last improvement but can
    only stop the loop once ``min_epochs`` epochs have completed.  Numerical
    failures abort the run and roll the parameters back to the last
    completed epoch, keeping the best checkpoint seen so far.  Passing a
    ``state`` (e.g. from a checkpoint) resumes at ``state.epoch`` with the
    stored parameters and moment accumulators; history rows cover only the
    epochs run by this call.
    """
    if len(train_set) == 0:
        raise InvalidArgumentError("training split is empty")
    _check_batch(config, train_set.inputs, train_set.targets)
    _check_batch(config, val_set.inputs, val_set.targets)
    if state is None:
        state = initial_state(config, train_set)
        since_best = 0
    else:
        since_best = max(state.epoch - 1 - state.best_epoch, 0)
    n_total = len(train_set)
    history: list[EpochRecord] = []
    failure = None
    stopped_early = False
    last_good = copy_params(state.params)
    for epoch in range(state.epoch, config.max_epochs):
        order = derive_rng(config.seed, "shuffle", epoch).permutation(n_total)
        sums = {name: 0.0 for name in
                ("objective", "elbo", "kl", "penalty_simplex", "penalty_entropy")}
        gate_sum = None
        locations = 0
        batches = 0
        try:
            for lo in range(0, n_total, config.batch_size):
                sel = order[lo : lo + config.batch_size]
                value, grads, diag = objective_gradients(
                    state.params, config,
                    train_set.inputs[sel], train_set.targets[sel],
                    epoch, n_total,
                )
                if not np.isfinite(value):
                    raise NumericalError("objective is non-finite")
                state.params = adam_step(
                    state.params, grads, state.opt, config.learning_rate
                )
                sums["objective"] += diag.objective
                sums["elbo"] += diag.elbo
                sums["kl"] += diag.kl
                sums["penalty_simplex"] += diag.penalty_simplex
                sums["penalty_entropy"] += diag.penalty_entropy
                gate_sum = diag.gate_sum if gate_sum is None else gate_sum + diag.gate_sum
                locations += diag.locations
                batches += 1
            val_nlpd = validation_nlpd(state.params, config, val_set, epoch)
            if not np.isfinite(val_nlpd):
                raise NumericalError("validation objective is non-finite")
        except NumericalError as err:
            failure = str(err)
            state.params = last_good
            break
        state.epoch = epoch + 1
        mean_gate = gate_sum / float(locations)
        record = EpochRecord(
            epoch=epoch,
            objective=sums["objective"] / batches,
            elbo=sums["elbo"] / batches,
            kl=sums["kl"] / batches,
            penalty_simplex=sums["penalty_simplex"] / batches,
            penalty_entropy=sums["penalty_entropy"] / batches,
            gate_entropy=float(ad.value(gate.batch_entropy(mean_gate))),
            r_eff=gate.effective_regimes(mean_gate),
            temperature=gate.schedule_value(config.temperature, epoch),
            val_nlpd=val_nlpd,
        )
        history.append(record)
        last_good = copy_params(state.params)
        if val_nlpd < state.best_val:
            state.best_val = val_nlpd
            state.best_epoch = epoch
            state.best_params = copy_params(state.params)
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience and state.epoch >= config.min_epochs:
            stopped_early = True
            break
    return TrainResult(
        state=state, history=history, stopped_early=stopped_early, failure=failure
    )
