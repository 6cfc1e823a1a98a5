"""Model assembly: forecasting heads built from the shared window encoder.

A model maps a lookback window to a per-location predictive state over the
forecast grid (horizon x channels).  All heads share the encoder backbone;
they differ in which pieces sit on top:

- ``regime_mixture``: stick-breaking gate, gate-mixed kernel over per-regime
  features, sparse variational GP residual, and a regime mixture likelihood
  whose components share one location and differ in scale and tail weight.
- ``gaussian`` / ``student_t``: single-component heads with location and
  input-dependent scale from linear heads, no GP residual.
- ``mdn_gaussian`` / ``mdn_t``: mixture-density heads with softmax weights
  and per-component location offsets, no GP residual.
- ``dkl_rbf`` / ``dkl_rq``: single-kernel sparse GP over learned features
  (deep kernel learning).  The GP carries the whole conditional mean (no
  deep-mean head) and the observation scale is the constant per-channel
  calibration (no residual-variance head); the observation family comes
  from ``likelihood``.  The single-kernel collapse of the full head is
  exactly this plus the retained mean and variance paths.

Windows are normalized per window and channel before the encoder runs; the
predictive state lives in those normalized coordinates and carries the
normalization stats so densities and samples can be mapped back.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import encoder as enc
from . import kernels as kn
from . import likelihood as lik
from . import svgp
from .errors import InvalidConfigError, NumericalError
from .gate import padded_softmax_log, stick_break_log
from .util import derive_rng

HEADS = (
    "regime_mixture",
    "gaussian",
    "student_t",
    "mdn_gaussian",
    "mdn_t",
    "dkl_rbf",
    "dkl_rq",
)

LIKELIHOODS = ("student_t_mixture", "hetero_gaussian", "gaussian_mixture")

GP_HEADS = ("regime_mixture", "dkl_rbf", "dkl_rq")
MDN_HEADS = ("mdn_gaussian", "mdn_t")
DKL_HEADS = ("dkl_rbf", "dkl_rq")
SINGLE_COMPONENT_HEADS = ("gaussian", "student_t", "dkl_rbf", "dkl_rq")

# Heads whose observation family is fixed by construction.  The default
# ``likelihood`` value is accepted for these so configs only need to name
# the head; any other explicit likelihood is a contradiction.
_FIXED_LIKELIHOOD = {
    "gaussian": "hetero_gaussian",
    "student_t": "student_t_mixture",
    "mdn_gaussian": "gaussian_mixture",
    "mdn_t": "student_t_mixture",
}

_ABLATION_FLAGS = (
    "softmax_gate",
    "no_deep_mean",
    "no_residual_variance",
    "shared_likelihood",
    "single_kernel",
)

INDUCING_DIAG_INIT = 1.0


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture description; every field is validated eagerly."""

    lookback: int
    channels: int
    horizon: int
    r_max: int = 16
    d_g: int = 4
    n_inducing: int = 512
    width: int = enc.DEFAULT_WIDTH
    head: str = "regime_mixture"
    likelihood: str = "student_t_mixture"
    quad_points: int = lik.DEFAULT_QUAD_POINTS
    softmax_gate: bool = False
    no_deep_mean: bool = False
    no_residual_variance: bool = False
    shared_likelihood: bool = False
    single_kernel: bool = False
    rq_shape: float = 1.0

    def __post_init__(self):
        if self.head not in HEADS:
            raise InvalidConfigError(f"unknown head {self.head!r}; choose from {HEADS}")
        if self.likelihood not in LIKELIHOODS:
            raise InvalidConfigError(
                f"unknown likelihood {self.likelihood!r}; choose from {LIKELIHOODS}"
            )
        for name in (
            "lookback",
            "channels",
            "horizon",
            "r_max",
            "d_g",
            "n_inducing",
            "width",
            "quad_points",
        ):
            if int(getattr(self, name)) < 1:
                raise InvalidConfigError(f"{name} must be >= 1")
        if not self.rq_shape > 0:
            raise InvalidConfigError("rq_shape must be > 0")
        flags = [name for name in _ABLATION_FLAGS if getattr(self, name)]
        if flags and self.head != "regime_mixture":
            raise InvalidConfigError(
                f"ablation flags {flags} only apply to the regime_mixture head"
            )
        if self.single_kernel and self.r_max != 1:
            raise InvalidConfigError(
                "single_kernel collapses the mixture: it requires r_max=1"
            )
        if self.single_kernel and (self.softmax_gate or self.shared_likelihood):
            raise InvalidConfigError(
                "single_kernel leaves no gate or per-regime likelihood to ablate"
            )
        if self.head in SINGLE_COMPONENT_HEADS and self.r_max != 1:
            raise InvalidConfigError(f"head {self.head!r} requires r_max=1")
        fixed = _FIXED_LIKELIHOOD.get(self.head)
        if fixed is not None and self.likelihood not in ("student_t_mixture", fixed):
            raise InvalidConfigError(
                f"head {self.head!r} fixes its observation family to {fixed!r}"
            )

    @property
    def encoder_shape(self) -> enc.EncoderShape:
        return enc.EncoderShape(
            lookback=self.lookback,
            channels=self.channels,
            horizon=self.horizon,
            r_max=self.r_max,
            d_g=self.d_g,
            width=self.width,
        )

    @property
    def effective_likelihood(self) -> str:
        return _FIXED_LIKELIHOOD.get(self.head, self.likelihood)

    @property
    def uses_gp(self) -> bool:
        return self.head in GP_HEADS

    @property
    def gate_kind(self) -> str:
        if self.softmax_gate or self.head in MDN_HEADS:
            return "softmax"
        return "stick"

    @property
    def base_kernel(self) -> str:
        return "rq" if self.head == "dkl_rq" else "rbf"


@dataclass
class ModelOutput:
    """Forward-pass bundle for one batch of windows.

    state: predictive state over the forecast grid, batch shape
    ``(B, H, D)`` (or ``(H, D)`` for a single window), in normalized
    window coordinates.  stats: per-window normalization used to map back.
    log_gate: log of ``state.gate``, kept on the log path so simplex
    penalties stay exact when weights underflow.  v_res: non-negative
    residual variance head output.  kl: KL from the variational inducing
    state to the GP prior (0.0 for heads without a GP).  jitter: diagonal
    jitter the K_ZZ factorization needed.
    """

    state: lik.PredictiveState
    stats: enc.RevinStats
    log_gate: np.ndarray
    v_res: np.ndarray
    kl: object
    jitter: float


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Shapes of every trainable array, keyed by the flat parameter name."""
    shapes = dict(enc.encoder_param_shapes(config.encoder_shape))
    r = config.r_max
    shapes["like.tau_weights"] = (r - 1,)
    shapes["like.nu_logits"] = (r,)
    shapes["like.offsets"] = (r,)
    shapes["like.calibration"] = (config.channels,)
    if config.uses_gp:
        m = config.n_inducing
        shapes["kernel.log_amplitude"] = (r,)
        shapes["kernel.log_lengthscale"] = (r,)
        shapes["inducing.gate_logits"] = (m, r - 1)
        shapes["inducing.features"] = (m, r, config.d_g)
        shapes["inducing.m"] = (m,)
        shapes["inducing.s_raw"] = (m, m)
    return shapes


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Seeded initial parameters for the configured head.

    Encoder and per-regime groups come from the encoder initializer; GP
    heads add inducing points with standard-normal gate logits and
    features, a zero variational mean, and an identity covariance factor.
    """
    params = enc.init_params(seed, config.encoder_shape)
    if config.uses_gp:
        m, r = config.n_inducing, config.r_max
        gate_rng = derive_rng(seed, "inducing", "gates")
        feat_rng = derive_rng(seed, "inducing", "features")
        params["inducing.gate_logits"] = gate_rng.standard_normal((m, r - 1))
        params["inducing.features"] = feat_rng.standard_normal((m, r, config.d_g))
        params["inducing.m"] = np.zeros(m)
        params["inducing.s_raw"] = svgp.raw_from_s_factor(
            INDUCING_DIAG_INIT * np.eye(m)
        )
    else:
        del params["kernel.log_amplitude"]
        del params["kernel.log_lengthscale"]
    expected = param_shapes(config)
    actual = {k: np.shape(v) for k, v in params.items()}
    if actual != expected:
        raise InvalidConfigError("parameter table does not match the config")
    return params


def gate_log_weights(logits, temperature: float, kind: str):
    """Log simplex weights (..., R) from (..., R-1) logits for either gate."""
    if kind == "softmax":
        return padded_softmax_log(logits, temperature)
    return stick_break_log(logits, temperature)


def gate_weights(logits, temperature: float, kind: str):
    """Simplex weights (..., R) from (..., R-1) logits for either gate."""
    return ad.exp(gate_log_weights(logits, temperature, kind))


def _unsq_last(x):
    return ad.reshape(x, np.shape(ad.value(x)) + (1,))


def _tied_first(vec, r: int):
    """Broadcast the first entry of a length-R parameter across all R slots."""
    return vec[0:1] * np.ones(r) if r > 1 else vec


def _likelihood_pieces(params: dict, config: ModelConfig):
    r = config.r_max
    tau_w = params["like.tau_weights"]
    nu_logits = params["like.nu_logits"]
    offsets = params["like.offsets"]
    if config.shared_likelihood:
        taus = np.ones(r)
        nu_logits = _tied_first(nu_logits, r)
        offsets = _tied_first(offsets, r)
    else:
        taus = lik.taus_from_weights(tau_w)
    if config.effective_likelihood == "student_t_mixture":
        nus = lik.nus_from_logits(nu_logits)
    else:
        nus = None
    return taus, nus, offsets


def forward(
    params: dict,
    config: ModelConfig,
    windows,
    temperature: float = 1.0,
    with_kl: bool = True,
) -> ModelOutput:
    """Run the configured head over raw windows ``(L, D)`` or ``(B, L, D)``.

    Windows are normalized internally; the returned predictive state is in
    normalized coordinates with the stats attached.  ``with_kl=False``
    skips the KL term (useful for evaluation-only passes).
    """
    for name, value in params.items():
        if not np.all(np.isfinite(ad.value(value))):
            raise NumericalError(f"parameter {name!r} contains non-finite values")
    normalized, stats = enc.normalize_windows(windows)
    shape = config.encoder_shape
    is_dkl = config.head in DKL_HEADS
    heads = enc.forward(
        normalized,
        params,
        shape,
        temperature=temperature,
        use_mean=not config.no_deep_mean and not is_dkl,
        use_vres=not config.no_residual_variance and not is_dkl,
        gate_kind=config.gate_kind,
    )
    lead = np.shape(windows)[:-2]
    h, d, r = config.horizon, config.channels, config.r_max

    log_pi = gate_log_weights(heads.gate_logits, temperature, config.gate_kind)
    pi = ad.exp(log_pi)
    taus, nus, offsets = _likelihood_pieces(params, config)
    scales = lik.regime_scales(params["like.calibration"], taus, heads.v_res)

    mu = _unsq_last(heads.mu)
    if config.head in MDN_HEADS:
        locs = mu + offsets
    else:
        locs = mu + np.zeros(r)

    if config.uses_gp:
        n = int(np.prod(lead + (h, d), dtype=int))
        gates_x = ad.reshape(pi, (n, r))
        feats_x = ad.reshape(heads.features, (n, r, config.d_g))
        gates_z = gate_weights(
            params["inducing.gate_logits"], temperature, config.gate_kind
        )
        s_factor = svgp.s_factor_from_raw(params["inducing.s_raw"])
        amps = ad.exp(params["kernel.log_amplitude"])
        ells = ad.exp(params["kernel.log_lengthscale"])
        rq_shape = (
            np.full(r, config.rq_shape) if config.base_kernel == "rq" else None
        )
        mean, var, _, jitter = svgp.marginal_posterior_parts(
            gates_x,
            feats_x,
            gates_z,
            feats_z=params["inducing.features"],
            m=params["inducing.m"],
            s_factor=s_factor,
            offsets_b=offsets,
            amplitudes=amps,
            lengthscales=ells,
            base=config.base_kernel,
            rq_shape=rq_shape,
        )
        m_delta = ad.reshape(mean, lead + (h, d))
        s_delta2 = ad.reshape(var, lead + (h, d))
        if with_kl:
            kl = svgp.kl_parts(
                gates_z,
                params["inducing.features"],
                params["inducing.m"],
                s_factor,
                offsets,
                amps,
                ells,
                base=config.base_kernel,
                rq_shape=rq_shape,
            )
            if not np.isfinite(ad.value(kl)):
                raise NumericalError("KL term is non-finite")
        else:
            kl = 0.0
    else:
        m_delta = np.zeros(lead + (h, d))
        s_delta2 = np.zeros(lead + (h, d))
        kl = 0.0
        jitter = 0.0

    state = lik.PredictiveState(
        gate=pi, locs=locs, scales=scales, nus=nus, m_delta=m_delta, s_delta2=s_delta2
    )
    for piece in (m_delta, s_delta2, scales):
        if not np.all(np.isfinite(ad.value(piece))):
            raise NumericalError("forward pass produced non-finite values")
    return ModelOutput(
        state=state,
        stats=stats,
        log_gate=log_pi,
        v_res=heads.v_res,
        kl=kl,
        jitter=float(jitter),
    )


def normalized_targets(targets, stats: enc.RevinStats):
    """Map raw targets (..., H, D) into the window's normalized coordinates."""
    targets = np.asarray(targets, dtype=float)
    loc = np.asarray(stats.location)[..., None, :]
    scale = np.asarray(stats.scale)[..., None, :]
    return (targets - loc) / scale


def data_logdensity(targets, output: ModelOutput, config: ModelConfig, rule=None):
    """Per-location bound term E_q[log p(y | delta)], shape (..., H, D).

    Evaluated in normalized coordinates: the change-of-variables term is
    constant in the parameters, so it is omitted from the training
    objective.  Exact for analytic families and for heads without a GP.
    """
    y = normalized_targets(targets, output.stats)
    if config.effective_likelihood == "hetero_gaussian":
        return lik.hetero_gaussian_elbo_term(y, output.state)
    rule = rule or lik.gauss_hermite(config.quad_points)
    return lik.elbo_data_term(y, output.state, rule)


def predictive_logdensity(
    targets, output: ModelOutput, config: ModelConfig, rule=None
):
    """Per-location log predictive density of the raw targets, (..., H, D).

    Marginalizes the residual (exactly for Gaussian families, by
    quadrature for Student-t mixtures) and includes the -log scale
    change-of-variables term so densities refer to the model's input
    coordinates.
    """
    y = normalized_targets(targets, output.stats)
    family = config.effective_likelihood
    if family == "hetero_gaussian":
        logp = lik.hetero_gaussian_logdensity(y, output.state)
    elif family == "gaussian_mixture":
        logp = lik.gaussian_mixture_logdensity(y, output.state)
    else:
        rule = rule or lik.gauss_hermite(config.quad_points)
        logp = lik.predictive_logdensity(y, output.state, rule)
    return logp - np.log(np.asarray(output.stats.scale))[..., None, :]


def predictive_mean(output: ModelOutput) -> np.ndarray:
    """Posterior predictive mean mapped back to raw coordinates, (..., H, D).

    Component means equal their locations for every supported family (the
    Student-t tails are bounded below at NU_MIN > 1), so the mixture mean
    is the gate-weighted location plus the residual mean.
    """
    state = output.state
    mean = ad.value(
        ad.sum(state.gate * state.locs, axis=-1) + state.m_delta
    )
    scale = np.asarray(output.stats.scale)[..., None, :]
    loc = np.asarray(output.stats.location)[..., None, :]
    return mean * scale + loc


def sample_predictive_original(
    output: ModelOutput, n: int, rng_seed: int
) -> np.ndarray:
    """Draw predictive samples in raw coordinates, shape (..., H, D, n)."""
    samples = lik.sample_predictive(output.state, n, rng_seed)
    scale = np.asarray(output.stats.scale)[..., None, :, None]
    loc = np.asarray(output.stats.location)[..., None, :, None]
    return samples * scale + loc


def deep_kernel_twin(config: ModelConfig) -> ModelConfig:
    """The deep-kernel config whose GP residual a single-kernel collapse shares.

    The collapse additionally retains the mean and residual-variance paths;
    its residual posterior, kernel, and inducing machinery are exactly those
    of this twin.
    """
    if not config.single_kernel:
        raise InvalidConfigError("config does not request the single-kernel collapse")
    return replace(
        config,
        head="dkl_rbf",
        single_kernel=False,
        no_deep_mean=False,
        no_residual_variance=False,
    )
