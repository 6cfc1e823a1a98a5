"""Command-line runner wiring data, training, evaluation, and diagnostics.

One JSON config document drives every subcommand; flags override config
keys, and the fully materialised config is written back next to the run
outputs so any run can be reproduced from its artifacts alone.

Subcommands: ``synth`` (generate and save a labeled series), ``train``
(one run per seed: checkpoint + history), ``eval`` (metric report on the
test split, aggregated across seeds), ``diagnose`` (CSV diagnostics for
one checkpoint), ``gradcheck`` (finite-difference audit of the gradients
on a tiny model).

Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent import futures
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from . import data
from . import evaluate as ev
from . import gate
from . import model
from . import training as tr
from .errors import InvalidArgumentError, InvalidConfigError, NumericalError
from .util import derive_rng, format_float

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2

DEFAULT_SEEDS = (42, 123, 456)
GRAD_TOLERANCE = 1e-4

RESOLVED_CONFIG = "resolved_config.json"
SERIES_FILE = "series.csv"
CHECKPOINT_FILE = "checkpoint.bin"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.json"

_REGIME_FIELDS = ("noise_scale", "tail_df", "sin_amplitude", "sin_period", "drift")
_SPLIT_FIELDS = ("lookback", "horizon", "val_fraction", "test_fraction")
_TOP_KEYS = {"out", "seeds", "data", "split", "model", "train"}


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved run description (every default materialised)."""

    out: Path
    seeds: tuple[int, ...]
    synth: data.SynthSpec | None
    csv: Path | None
    split: data.SplitSpec
    model: model.ModelConfig
    train: dict  # TrainConfig fields minus model/seed, schedules as dicts


def _switching_to_dict(switching) -> dict:
    if isinstance(switching, data.AbruptSwitching):
        return {"kind": "abrupt",
                "change_times": [int(t) for t in switching.change_times]}
    if isinstance(switching, data.MarkovSwitching):
        return {"kind": "markov",
                "transition": np.asarray(switching.transition, dtype=float).tolist()}
    return {"kind": "gradual", "change_time": int(switching.change_time),
            "width": float(switching.width)}


def _switching_from_dict(block: dict):
    kind = block.get("kind")
    if kind == "abrupt":
        return data.AbruptSwitching(tuple(int(t) for t in block["change_times"]))
    if kind == "markov":
        return data.MarkovSwitching(np.asarray(block["transition"], dtype=float))
    if kind == "gradual":
        return data.GradualSwitching(int(block["change_time"]), float(block["width"]))
    raise InvalidConfigError(f"unknown switching kind {kind!r}")


def _synth_to_dict(spec: data.SynthSpec) -> dict:
    return {
        "length": spec.length,
        "channels": spec.channels,
        "seed": spec.seed,
        "regimes": [
            {name: float(getattr(regime, name)) for name in _REGIME_FIELDS}
            for regime in spec.regimes
        ],
        "switching": _switching_to_dict(spec.switching),
    }


def _synth_from_dict(block: dict) -> data.SynthSpec:
    regimes = []
    for spec in block["regimes"]:
        unknown = set(spec) - set(_REGIME_FIELDS)
        if unknown:
            raise InvalidConfigError(f"unknown regime fields: {sorted(unknown)}")
        regimes.append(data.RegimeSpec(
            noise_scale=float(spec["noise_scale"]),
            tail_df=float(spec["tail_df"]),
            sin_amplitude=float(spec.get("sin_amplitude", 0.0)),
            sin_period=float(spec.get("sin_period", 24.0)),
            drift=float(spec.get("drift", 0.0)),
        ))
    regimes = tuple(regimes)
    return data.SynthSpec(
        length=int(block["length"]),
        channels=int(block["channels"]),
        regimes=regimes,
        switching=_switching_from_dict(block["switching"]),
        seed=int(block.get("seed", 0)),
    )


def load_run_config(path, seed_override=None, out_override=None) -> RunConfig:
    """Parse and fully resolve a run config document."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise InvalidConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a JSON object")
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")

    data_block = raw.get("data")
    if not isinstance(data_block, dict) or set(data_block) not in ({"synth"}, {"csv"}):
        raise InvalidConfigError(
            "config 'data' must contain exactly one of 'synth' or 'csv'"
        )
    try:
        synth = (_synth_from_dict(data_block["synth"])
                 if "synth" in data_block else None)
    except KeyError as exc:
        raise InvalidConfigError(f"synth spec is missing field {exc}") from exc
    csv_path = Path(data_block["csv"]) if "csv" in data_block else None

    split_block = raw.get("split", {})
    if set(split_block) - set(_SPLIT_FIELDS):
        raise InvalidConfigError("unknown split fields")
    split = data.SplitSpec(**split_block)

    model_block = raw.get("model")
    if not isinstance(model_block, dict):
        raise InvalidConfigError("config needs a 'model' object")
    try:
        mcfg = model.ModelConfig(**model_block)
    except TypeError as exc:
        raise InvalidConfigError(f"bad model config: {exc}") from exc

    base = ck.train_config_to_dict(tr.default_train_config(mcfg))
    base.pop("model")
    base.pop("seed")
    overrides = raw.get("train", {})
    if set(overrides) - set(base):
        raise InvalidConfigError(
            f"unknown train fields: {sorted(set(overrides) - set(base))}"
        )
    base.update(overrides)

    seeds = raw.get("seeds", list(DEFAULT_SEEDS))
    if seed_override is not None:
        seeds = [seed_override]
    if not seeds:
        raise InvalidConfigError("seeds must be nonempty")
    out = out_override if out_override is not None else raw.get("out")
    if out is None:
        raise InvalidConfigError("output directory required ('out' key or --out)")

    run = RunConfig(
        out=Path(out),
        seeds=tuple(int(s) for s in seeds),
        synth=synth,
        csv=csv_path,
        split=split,
        model=mcfg,
        train=base,
    )
    train_config_for(run, run.seeds[0])  # validate the resolved train fields
    return run


def resolved_dict(run: RunConfig) -> dict:
    source = ({"synth": _synth_to_dict(run.synth)} if run.synth is not None
              else {"csv": str(run.csv)})
    return {
        "data": source,
        "model": ck.model_config_to_dict(run.model),
        "out": str(run.out),
        "seeds": list(run.seeds),
        "split": {name: getattr(run.split, name) for name in _SPLIT_FIELDS},
        "train": run.train,
    }


def write_resolved(run: RunConfig) -> Path:
    run.out.mkdir(parents=True, exist_ok=True)
    path = run.out / RESOLVED_CONFIG
    path.write_text(json.dumps(resolved_dict(run), indent=2, sort_keys=True) + "\n")
    return path


def train_config_for(run: RunConfig, seed: int) -> tr.TrainConfig:
    block = dict(run.train)
    block["model"] = ck.model_config_to_dict(run.model)
    block["seed"] = int(seed)
    return ck.train_config_from_dict(block)


def load_series(run: RunConfig) -> data.LabeledSeries:
    if run.synth is not None:
        return data.synth_generate(run.synth)
    with open(run.csv, newline="") as handle:
        header = handle.readline().strip().split(",")
    if header and header[-1] == "regime_label":
        return data.read_labeled_csv(run.csv)
    values = data.ingest_csv(run.csv)
    return data.LabeledSeries(
        values=values, labels=np.zeros(values.shape[0], dtype=int)
    )


def prepare_sets(run: RunConfig):
    """(train, val, test, scaler) in standard-scaled coordinates."""
    series = load_series(run)
    splits = data.make_windows(series, run.split)
    return data.standard_scale(*splits)


def _seed_dir(run: RunConfig, seed: int) -> Path:
    return run.out / f"seed{seed}"


def _default_checkpoints(run: RunConfig) -> list[Path]:
    return [_seed_dir(run, seed) / CHECKPOINT_FILE for seed in run.seeds]


def _load_matching_checkpoint(run: RunConfig, path) -> tuple[ck.Checkpoint, tr.TrainConfig]:
    loaded = ck.load_checkpoint(path)
    config = train_config_for(run, loaded.config.seed)
    if ck.config_hash(config) != loaded.config_digest:
        raise InvalidConfigError(
            f"checkpoint {path} was trained under a different configuration"
        )
    return loaded, config


def _eval_temperature(config: tr.TrainConfig, checkpoint: ck.Checkpoint) -> float:
    return gate.schedule_value(config.temperature, max(checkpoint.best_epoch, 0))


def cmd_synth(run: RunConfig) -> int:
    if run.synth is None:
        raise InvalidConfigError("the synth command needs a synth data source")
    series = data.synth_generate(run.synth)
    run.out.mkdir(parents=True, exist_ok=True)
    write_resolved(run)
    target = run.out / SERIES_FILE
    data.write_labeled_csv(series, target)
    occupancy = np.bincount(series.labels, minlength=len(run.synth.regimes))
    occupancy = occupancy / series.labels.shape[0]
    print(f"wrote {target}")
    print(f"length {series.values.shape[0]} channels {series.values.shape[1]}")
    print("regime occupancy " + " ".join(format_float(v) for v in occupancy))
    return EXIT_OK


def _train_one_seed(resolved: dict, seed: int) -> tuple[int, int, int, float, str | None]:
    """Run one seed end to end; safe to call in a separate process."""
    run = _run_from_resolved(resolved)
    train_set, val_set, _, _ = prepare_sets(run)
    config = train_config_for(run, seed)
    result = tr.train(config, train_set, val_set)
    seed_dir = _seed_dir(run, seed)
    ck.save_checkpoint(seed_dir / CHECKPOINT_FILE, result.state, config)
    ck.write_history(seed_dir / HISTORY_FILE, result.history)
    state = result.state
    return seed, state.epoch, state.best_epoch, state.best_val, result.failure


def _run_from_resolved(resolved: dict) -> RunConfig:
    source = resolved["data"]
    return RunConfig(
        out=Path(resolved["out"]),
        seeds=tuple(int(s) for s in resolved["seeds"]),
        synth=_synth_from_dict(source["synth"]) if "synth" in source else None,
        csv=Path(source["csv"]) if "csv" in source else None,
        split=data.SplitSpec(**resolved["split"]),
        model=ck.model_config_from_dict(resolved["model"]),
        train=dict(resolved["train"]),
    )


def cmd_train(run: RunConfig, args) -> int:
    write_resolved(run)
    resolved = resolved_dict(run)
    summaries = []
    if args.checkpoint:
        if len(args.checkpoint) != 1 or len(run.seeds) != 1:
            raise InvalidConfigError("resuming needs exactly one checkpoint and seed")
        # Resume continues under the current run config (e.g. a raised epoch
        # budget), so only the architecture has to match the checkpoint.
        loaded = ck.load_checkpoint(args.checkpoint[0])
        if ck.model_config_to_dict(loaded.config.model) != ck.model_config_to_dict(run.model):
            raise InvalidConfigError(
                f"checkpoint {args.checkpoint[0]} was trained with a different model"
            )
        config = train_config_for(run, run.seeds[0])
        train_set, val_set, _, _ = prepare_sets(run)
        result = tr.train(config, train_set, val_set, state=loaded.resume_state())
        seed = run.seeds[0]
        seed_dir = _seed_dir(run, seed)
        ck.save_checkpoint(seed_dir / CHECKPOINT_FILE, result.state, config)
        ck.write_history(seed_dir / HISTORY_FILE, result.history,
                         append=(seed_dir / HISTORY_FILE).exists())
        state = result.state
        summaries.append((seed, state.epoch, state.best_epoch, state.best_val,
                          result.failure))
    elif args.parallel_seeds > 1 and len(run.seeds) > 1:
        with futures.ProcessPoolExecutor(max_workers=args.parallel_seeds) as pool:
            jobs = [pool.submit(_train_one_seed, resolved, seed)
                    for seed in run.seeds]
            summaries = [job.result() for job in jobs]
    else:
        summaries = [_train_one_seed(resolved, seed) for seed in run.seeds]

    failed = False
    for seed, epochs, best_epoch, best_val, failure in summaries:
        line = (f"seed {seed}: epochs={epochs} best_epoch={best_epoch} "
                f"best_val={format_float(best_val) if np.isfinite(best_val) else 'inf'}")
        if failure is not None:
            failed = True
            line += f" FAILED: {failure}"
        print(line)
    return EXIT_NUMERICAL if failed else EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    write_resolved(run)
    _, _, test_set, _ = prepare_sets(run)
    paths = args.checkpoint or _default_checkpoints(run)
    reports = {}
    for path in paths:
        loaded, config = _load_matching_checkpoint(run, path)
        report = ev.evaluate_model(
            loaded.best_params, config.model, test_set,
            temperature=_eval_temperature(config, loaded),
            batch_size=config.batch_size,
        )
        reports[config.seed] = report
    payload = {
        "seeds": {str(seed): reports[seed].as_dict() for seed in sorted(reports)},
        "aggregate": None,
    }
    if len(reports) > 1:
        agg = ev.aggregate_seeds([reports[seed] for seed in sorted(reports)])
        payload["aggregate"] = {
            "mean": agg.mean.as_dict(),
            "std": agg.std.as_dict(),
            "n_seeds": agg.n_seeds,
        }
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    (run.out / METRICS_FILE).write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_diagnose(run: RunConfig, args) -> int:
    write_resolved(run)
    _, _, test_set, _ = prepare_sets(run)
    paths = args.checkpoint or _default_checkpoints(run)[:1]
    loaded, config = _load_matching_checkpoint(run, paths[0])
    temperature = _eval_temperature(config, loaded)
    dest = run.out / f"diagnostics-seed{config.seed}"
    files = ev.export_diagnostics(
        loaded.best_params, config.model, test_set, dest,
        temperature=temperature, batch_size=config.batch_size,
    )
    for name in sorted(files):
        print(f"wrote {files[name]}")
    if test_set.labels is not None:
        gates = ev.gate_trajectories(
            loaded.best_params, config.model, test_set,
            temperature=temperature, batch_size=config.batch_size,
        )
        labels = np.broadcast_to(
            np.asarray(test_set.labels)[:, :, None], gates.shape[:-1]
        )
        recovery = ev.regime_recovery(gates, labels)
        print(f"regime recovery accuracy {format_float(recovery.accuracy)} "
              f"mutual information {format_float(recovery.mutual_information)}")
    return EXIT_OK


def cmd_gradcheck(args, seeds) -> int:
    tiny = model.ModelConfig(
        lookback=4, channels=1, horizon=2, r_max=3, d_g=2, n_inducing=4,
        width=5, quad_points=20,
    )
    worst_overall = 0.0
    for seed in seeds:
        config = tr.TrainConfig(model=tiny, batch_size=4, seed=seed)
        rng = derive_rng(seed, "gradcheck")
        windows = rng.standard_normal((4, 4, 1)) * 2.0 + 0.5
        targets = rng.standard_normal((4, 2, 1)) * 2.0 + 0.5
        params = model.init_params(tiny, seed)
        report = tr.grad_check_groups(params, config, windows, targets,
                                      epoch=1, n_total=9)
        worst_key = max(report, key=report.get)
        print(f"seed {seed}: worst relative error "
              f"{format_float(report[worst_key])} ({worst_key})")
        for name in sorted(report):
            print(f"  {name}: {format_float(report[name])}")
        worst_overall = max(worst_overall, report[worst_key])
    if worst_overall > GRAD_TOLERANCE:
        print(f"gradient check FAILED: {format_float(worst_overall)} > "
              f"{format_float(GRAD_TOLERANCE)}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="regimecast",
        description="Regime-mixture probabilistic forecasting runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", type=Path, required=config_required,
                       help="JSON run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed list with one seed")
        p.add_argument("--out", type=Path, default=None,
                       help="override the output directory")

    common(sub.add_parser("synth", help="generate and save a synthetic series"))
    train_p = sub.add_parser("train", help="train one run per seed")
    common(train_p)
    train_p.add_argument("--parallel-seeds", type=int, default=1,
                         help="run this many seed processes concurrently")
    train_p.add_argument("--checkpoint", type=Path, action="append",
                         help="resume from this checkpoint (single seed)")
    eval_p = sub.add_parser("eval", help="metric report on the test split")
    common(eval_p)
    eval_p.add_argument("--checkpoint", type=Path, action="append",
                        help="checkpoint(s) to evaluate; defaults to the run's")
    diag_p = sub.add_parser("diagnose", help="export gate/regime diagnostics")
    common(diag_p)
    diag_p.add_argument("--checkpoint", type=Path, action="append",
                        help="checkpoint to diagnose; defaults to the first seed")
    grad_p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(grad_p, config_required=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            if args.seed is not None:
                seeds = (args.seed,)
            elif args.config is not None:
                seeds = load_run_config(args.config, out_override=".").seeds
            else:
                seeds = DEFAULT_SEEDS
            return cmd_gradcheck(args, seeds)
        run = load_run_config(args.config, seed_override=args.seed,
                              out_override=args.out)
        if args.command == "synth":
            return cmd_synth(run)
        if args.command == "train":
            return cmd_train(run, args)
        if args.command == "eval":
            return cmd_eval(run, args)
        return cmd_diagnose(run, args)
    except (InvalidConfigError, InvalidArgumentError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
