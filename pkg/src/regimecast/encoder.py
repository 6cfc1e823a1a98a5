"""Window normalisation and the shared backbone feeding the output heads.

A window is normalised per channel (location/scale, scale floored), run
through a two-layer MLP over the flattened values, and projected by four
linear heads: deterministic mean, gate logits, per-regime kernel features,
and a residual observation variance.  The variance head reads the post-gate
concatenation [pi_r ; z_r] so it is conditioned on the regime allocation
rather than raw backbone state.

All forward math dispatches through the autodiff layer, so the same code
serves plain-array evaluation and gradient-based training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import InvalidArgumentError
from .gate import padded_softmax_gate, stick_break
from .util import derive_rng

REVIN_SCALE_FLOOR = 1e-6
DEFAULT_WIDTH = 128


@dataclass(frozen=True)
class Window:
    """Lookback block of raw values plus the forecast horizon length."""

    values: np.ndarray  # (L, D)
    horizon: int

    def __post_init__(self):
        v = np.asarray(ad.value(self.values))
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise InvalidArgumentError("window values must be (L, D) with L, D >= 1")
        if self.horizon < 1:
            raise InvalidArgumentError("horizon must be >= 1")
        if not np.all(np.isfinite(v)):
            raise InvalidArgumentError("window values must be finite")

    @property
    def lookback(self) -> int:
        return np.asarray(ad.value(self.values)).shape[0]

    @property
    def channels(self) -> int:
        return np.asarray(ad.value(self.values)).shape[1]


@dataclass(frozen=True)
class RevinStats:
    """Per-channel location and (floored) scale of one window."""

    location: np.ndarray  # (D,)
    scale: np.ndarray  # (D,)

    def __post_init__(self):
        if np.any(np.asarray(self.scale) <= 0):
            raise InvalidArgumentError("scale must be > 0")


@dataclass(frozen=True)
class EncoderShape:
    """Static dimensions shared by the backbone and heads."""

    lookback: int
    channels: int
    horizon: int
    r_max: int
    d_g: int
    width: int = DEFAULT_WIDTH

    def __post_init__(self):
        for name in ("lookback", "channels", "horizon", "d_g", "width"):
            if getattr(self, name) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.r_max < 1:
            raise InvalidArgumentError("r_max must be >= 1")

    @property
    def locations(self) -> int:
        return self.horizon * self.channels


@dataclass
class HeadOutputs:
    """Per-location head values over the forecast grid.

    mu: (..., H, D); gate_logits: (..., H, D, R-1); features:
    (..., H, D, R, d_g); v_res: (..., H, D) non-negative.
    """

    mu: np.ndarray
    gate_logits: np.ndarray
    features: np.ndarray
    v_res: np.ndarray

    def __post_init__(self):
        for name in ("mu", "gate_logits", "features", "v_res"):
            if not np.all(np.isfinite(ad.value(getattr(self, name)))):
                raise InvalidArgumentError(f"{name} must be finite")
        if np.any(ad.value(self.v_res) < 0):
            raise InvalidArgumentError("v_res must be >= 0")


def revin_normalize(window: Window) -> tuple[Window, RevinStats]:
    """Per-channel standardisation with the scale floored at 1e-6."""
    values = np.asarray(window.values, dtype=float)
    location = values.mean(axis=0)
    scale = np.maximum(values.std(axis=0), REVIN_SCALE_FLOOR)
    normalized = (values - location) / scale
    return Window(normalized, window.horizon), RevinStats(location, scale)


def revin_denormalize(values, stats: RevinStats):
    """Inverse of revin_normalize on the last (channel) axis."""
    return values * stats.scale + stats.location


def normalize_windows(values) -> tuple[np.ndarray, RevinStats]:
    """Per-window, per-channel standardisation of (L, D) or (B, L, D) blocks.

    Returns the normalized block and stats whose arrays carry the leading
    batch shape: location and scale are (D,) or (B, D).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim not in (2, 3):
        raise InvalidArgumentError("windows must be (L, D) or (B, L, D)")
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError("window values must be finite")
    location = values.mean(axis=-2)
    scale = np.maximum(values.std(axis=-2), REVIN_SCALE_FLOOR)
    normalized = (values - location[..., None, :]) / scale[..., None, :]
    return normalized, RevinStats(location, scale)


def original_scale_logdensity(normalized_logdensity, stats: RevinStats, channel: int):
    """Change of variables: densities pick up a -log scale Jacobian term."""
    return normalized_logdensity - np.log(stats.scale[channel])


def _linear(x, w, b):
    return ad.matmul(x, w) + b


def forward(values, params: dict, shape: EncoderShape, temperature: float = 1.0,
            use_mean: bool = True, use_vres: bool = True,
            gate_kind: str = "stick") -> HeadOutputs:
    """Run the backbone and heads over one normalized window or a batch.

    values: (L, D) or (B, L, D), already normalized.  Deterministic given
    params.  use_mean / use_vres switch the corresponding heads to exact
    zeros for the documented ablations; gate_kind ("stick" or "softmax")
    selects the transform feeding the residual-variance head so it sees the
    same gate weights the rest of the model uses.
    """
    if gate_kind not in ("stick", "softmax"):
        raise InvalidArgumentError("gate_kind must be 'stick' or 'softmax'")
    v = ad.value(values)
    batched = v.ndim == 3
    if v.shape[-2:] != (shape.lookback, shape.channels):
        raise InvalidArgumentError(
            f"expected window shape (..., {shape.lookback}, {shape.channels}),"
            f" got {v.shape}"
        )
    lead = v.shape[:1] if batched else ()
    h, d, r, d_g = shape.horizon, shape.channels, shape.r_max, shape.d_g

    x = ad.reshape(values, lead + (shape.lookback * shape.channels,))
    hidden = ad.softplus(_linear(x, params["backbone.w1"], params["backbone.b1"]))
    hidden = ad.softplus(_linear(hidden, params["backbone.w2"], params["backbone.b2"]))

    gate_logits = ad.reshape(
        _linear(hidden, params["head_gate.w"], params["head_gate.b"]),
        lead + (h, d, r - 1),
    )
    features = ad.reshape(
        _linear(hidden, params["head_features.w"], params["head_features.b"]),
        lead + (h, d, r, d_g),
    )

    if use_mean:
        mu = ad.reshape(
            _linear(hidden, params["head_mean.w"], params["head_mean.b"]),
            lead + (h, d),
        )
    else:
        mu = np.zeros(lead + (h, d))

    if use_vres:
        if gate_kind == "softmax":
            gate = padded_softmax_gate(gate_logits, temperature)
        else:
            gate = stick_break(gate_logits, temperature)
        feat_flat = ad.reshape(features, lead + (h, d, r * d_g))
        vres_in = ad.concatenate([gate, feat_flat], axis=-1)
        v_res = ad.softplus(
            ad.matmul(vres_in, params["head_vres.w"]) + params["head_vres.b"]
        )
    else:
        v_res = np.zeros(lead + (h, d))

    return HeadOutputs(mu=mu, gate_logits=gate_logits, features=features, v_res=v_res)


def encoder_param_shapes(shape: EncoderShape) -> dict[str, tuple]:
    """Shapes of every backbone/head parameter array."""
    flat_in = shape.lookback * shape.channels
    w = shape.width
    n = shape.locations
    r, d_g = shape.r_max, shape.d_g
    return {
        "backbone.w1": (flat_in, w),
        "backbone.b1": (w,),
        "backbone.w2": (w, w),
        "backbone.b2": (w,),
        "head_mean.w": (w, n),
        "head_mean.b": (n,),
        "head_gate.w": (w, n * (r - 1)),
        "head_gate.b": (n * (r - 1),),
        "head_features.w": (w, n * r * d_g),
        "head_features.b": (n * r * d_g,),
        "head_vres.w": (r * (1 + d_g),),
        "head_vres.b": (),
    }


# Initialization constants: per-regime jitter scales and the calibration
# start value; lengthscale/amplitude ranges are log-uniform.
TAU_JITTER = 0.5
NU_LOGIT_JITTER = 0.3
NU_LOGIT_INIT = 0.0
CALIBRATION_INIT = 0.5
LENGTHSCALE_RANGE = (0.5, 5.0)
AMPLITUDE_RANGE = (0.5, 1.5)


_LAYER_PAIRS = (
    ("backbone.w1", "backbone.b1"),
    ("backbone.w2", "backbone.b2"),
    ("head_mean.w", "head_mean.b"),
    ("head_gate.w", "head_gate.b"),
    ("head_features.w", "head_features.b"),
    ("head_vres.w", "head_vres.b"),
)


def init_params(seed: int, shape: EncoderShape) -> dict[str, np.ndarray]:
    """Seeded parameter initialization for the encoder and regime groups.

    Backbone/head weights use uniform fan-in scaling.  Per-regime scale and
    tail parameters get positive jitter so no two regimes start at the same
    point, and the kernel hyperparameters are drawn log-uniformly.
    """
    shapes = encoder_param_shapes(shape)
    params: dict[str, np.ndarray] = {}
    for wname, bname in _LAYER_PAIRS:
        bound = 1.0 / np.sqrt(shapes[wname][0])
        for name in (wname, bname):
            rng = derive_rng(seed, "encoder", name)
            params[name] = rng.uniform(-bound, bound, size=shapes[name])

    r, d = shape.r_max, shape.channels
    rng = derive_rng(seed, "regimes")
    params["like.tau_weights"] = rng.normal(0.0, TAU_JITTER, size=r - 1)
    params["like.nu_logits"] = NU_LOGIT_INIT + rng.normal(0.0, NU_LOGIT_JITTER, size=r)
    params["like.offsets"] = np.zeros(r)
    params["like.calibration"] = np.full(d, CALIBRATION_INIT)
    params["kernel.log_lengthscale"] = rng.uniform(
        np.log(LENGTHSCALE_RANGE[0]), np.log(LENGTHSCALE_RANGE[1]), size=r
    )
    params["kernel.log_amplitude"] = rng.uniform(
        np.log(AMPLITUDE_RANGE[0]), np.log(AMPLITUDE_RANGE[1]), size=r
    )
    return params
