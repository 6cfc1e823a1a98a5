"""Versioned run artifacts: checkpoint container and history CSV.

A checkpoint is a single binary file: an 8-byte magic/version tag, a
little-endian uint64 header length, a canonical JSON header, and the raw
float64 array payloads concatenated in header order.  It carries enough to
both evaluate the selected model (best-validation parameters and their
epoch) and resume optimisation (final parameters, moment accumulators,
epoch counter, and the run seed).  Serialisation is deterministic: the
same state and config always produce the same bytes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import gate
from . import model
from . import training as tr
from .errors import InvalidArgumentError
from .util import format_float

MAGIC = b"RGCKPT01"
VERSION = 1

_BEST = "best."
_LAST = "last."
_ADAM_M = "adam_m."
_ADAM_V = "adam_v."


def schedule_to_dict(schedule: gate.GateSchedule) -> dict:
    return {
        "start_value": schedule.start_value,
        "end_value": schedule.end_value,
        "anneal_epochs": schedule.anneal_epochs,
    }


def schedule_from_dict(data: dict) -> gate.GateSchedule:
    return gate.GateSchedule(
        start_value=float(data["start_value"]),
        end_value=float(data["end_value"]),
        anneal_epochs=int(data["anneal_epochs"]),
    )


_MODEL_FIELDS = (
    "lookback", "channels", "horizon", "r_max", "d_g", "n_inducing", "width",
    "head", "likelihood", "quad_points", "softmax_gate", "no_deep_mean",
    "no_residual_variance", "shared_likelihood", "single_kernel", "rq_shape",
)

_SCHEDULE_FIELDS = ("temperature", "simplex_alpha", "lambda_batch")
_TRAIN_SCALARS = (
    "batch_size", "learning_rate", "max_epochs", "min_epochs", "patience",
    "lambda_point", "lambda_simplex", "micro_batch", "seed",
)


def model_config_to_dict(config: model.ModelConfig) -> dict:
    return {name: getattr(config, name) for name in _MODEL_FIELDS}


def model_config_from_dict(data: dict) -> model.ModelConfig:
    return model.ModelConfig(**{name: data[name] for name in _MODEL_FIELDS})


def train_config_to_dict(config: tr.TrainConfig) -> dict:
    out = {"model": model_config_to_dict(config.model)}
    for name in _TRAIN_SCALARS:
        out[name] = getattr(config, name)
    for name in _SCHEDULE_FIELDS:
        out[name] = schedule_to_dict(getattr(config, name))
    return out


def train_config_from_dict(data: dict) -> tr.TrainConfig:
    kwargs = {"model": model_config_from_dict(data["model"])}
    for name in _TRAIN_SCALARS:
        kwargs[name] = data[name]
    for name in _SCHEDULE_FIELDS:
        kwargs[name] = schedule_from_dict(data[name])
    return tr.TrainConfig(**kwargs)


def config_hash(config: tr.TrainConfig) -> str:
    """Canonical digest of the full training configuration."""
    payload = json.dumps(
        train_config_to_dict(config), sort_keys=True, separators=(",", ":")
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class Checkpoint:
    """Loaded checkpoint contents."""

    config: tr.TrainConfig
    best_params: dict[str, np.ndarray]
    last_params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_step: int
    epoch: int
    best_epoch: int
    best_val: float
    config_digest: str

    def resume_state(self) -> tr.TrainState:
        """Training state that continues this run's epoch numbering."""
        return tr.TrainState(
            params=tr.copy_params(self.last_params),
            opt=tr.AdamState(
                m=tr.copy_params(self.adam_m),
                v=tr.copy_params(self.adam_v),
                step=self.adam_step,
            ),
            epoch=self.epoch,
            best_val=self.best_val,
            best_epoch=self.best_epoch,
            best_params=tr.copy_params(self.best_params),
        )


def save_checkpoint(path, state: tr.TrainState, config: tr.TrainConfig) -> Path:
    """Write the training state; deterministic bytes for identical inputs."""
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = []
    for key in sorted(state.params):
        arrays.append((_BEST + key, state.best_params[key]))
        arrays.append((_LAST + key, state.params[key]))
        arrays.append((_ADAM_M + key, state.opt.m[key]))
        arrays.append((_ADAM_V + key, state.opt.v[key]))
    header = {
        "arrays": [
            {"name": name, "shape": list(np.shape(value))} for name, value in arrays
        ],
        "meta": {
            "adam_step": int(state.opt.step),
            "best_epoch": int(state.best_epoch),
            "best_val": None if np.isinf(state.best_val) else float(state.best_val),
            "epoch": int(state.epoch),
            "version": VERSION,
        },
        "config": train_config_to_dict(config),
        "config_hash": config_hash(config),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(MAGIC)
        handle.write(np.uint64(len(blob)).tobytes())
        handle.write(blob)
        for _, value in arrays:
            handle.write(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise InvalidArgumentError(f"{path} is not a checkpoint file")
    offset = len(MAGIC)
    blob_len = int(np.frombuffer(raw, dtype="<u8", count=1, offset=offset)[0])
    offset += 8
    header = json.loads(raw[offset : offset + blob_len].decode("utf-8"))
    offset += blob_len
    if header["meta"]["version"] != VERSION:
        raise InvalidArgumentError(
            f"unsupported checkpoint version {header['meta']['version']}"
        )
    groups: dict[str, dict[str, np.ndarray]] = {
        _BEST: {}, _LAST: {}, _ADAM_M: {}, _ADAM_V: {}
    }
    for entry in header["arrays"]:
        shape = tuple(int(v) for v in entry["shape"])
        count = int(np.prod(shape, dtype=int))
        value = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        offset += count * 8
        name = entry["name"]
        for prefix, group in groups.items():
            if name.startswith(prefix):
                group[name[len(prefix):]] = value.reshape(shape).copy()
                break
        else:
            raise InvalidArgumentError(f"unknown array group for {name!r}")
    if offset != len(raw):
        raise InvalidArgumentError("checkpoint payload length mismatch")
    meta = header["meta"]
    best_val = meta["best_val"]
    return Checkpoint(
        config=train_config_from_dict(header["config"]),
        best_params=groups[_BEST],
        last_params=groups[_LAST],
        adam_m=groups[_ADAM_M],
        adam_v=groups[_ADAM_V],
        adam_step=int(meta["adam_step"]),
        epoch=int(meta["epoch"]),
        best_epoch=int(meta["best_epoch"]),
        best_val=np.inf if best_val is None else float(best_val),
        config_digest=header["config_hash"],
    )


def write_history(path, records, append: bool = False) -> Path:
    """History CSV, one row per epoch, deterministic float formatting."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not (append and path.exists())
    with open(path, "a" if not fresh else "w", newline="") as handle:
        if fresh:
            handle.write(",".join(tr.HISTORY_FIELDS) + "\n")
        for record in records:
            row = record.as_row()
            cells = []
            for name in tr.HISTORY_FIELDS:
                value = row[name]
                if name in ("epoch", "r_eff"):
                    cells.append(str(int(value)))
                else:
                    cells.append(format_float(value))
            handle.write(",".join(cells) + "\n")
    return path


def read_history(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or tuple(lines[0].split(",")) != tr.HISTORY_FIELDS:
        raise InvalidArgumentError("history file has an unexpected header")
    rows = []
    for line in lines[1:]:
        cells = line.split(",")
        row = {}
        for name, cell in zip(tr.HISTORY_FIELDS, cells):
            row[name] = int(cell) if name in ("epoch", "r_eff") else float(cell)
        rows.append(row)
    return rows
