"""Command-line interface.

Subcommands: synth (single clip), mix (SNR mixing), dataset (build and
persist splits), train (one training run), eval (checkpoint on a split),
experiment (full protocol with reports), report (re-render saved runs).

Exit codes: 0 success, 2 configuration/usage, 3 data or audio I/O,
4 numeric failure, 1 anything unexpected.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .audio import read_wav, write_wav
from .data import (
    ManifestSource,
    SplitSpec,
    build_splits,
    measured_snr_db,
    mix_components,
    read_manifest,
    write_manifest,
)
from .errors import ConfigError, DataError, NoiseFaultError
from .experiment import (
    ExperimentSpec,
    ResultRow,
    ResultTable,
    emit_table,
    run_experiment,
    write_reports,
)
from .features import DESK_SCALE_CONFIG, FULL_SCALE_CONFIG, FeatureConfig
from .net import LrSchedule, load_checkpoint, save_checkpoint
from .synth import (
    MACHINES,
    NoiseEnvironment,
    condition_by_name,
    gen_machine_sound,
    gen_noise,
)
from .techniques import TECHNIQUE_ALIASES, TechniqueConfig, parse_technique
from .train import TrainRun, evaluate, train, write_history_csv

_ENV_CHOICES = [env.value for env in NoiseEnvironment]


def _feature_config(name: str) -> FeatureConfig:
    if name == "desk":
        return DESK_SCALE_CONFIG
    if name == "full":
        return FULL_SCALE_CONFIG
    raise ConfigError(f"unknown feature preset {name!r}; use 'desk' or 'full'")


def _feature_config_json(cfg: FeatureConfig) -> dict:
    return {
        "n_fft": cfg.n_fft, "hop": cfg.hop, "n_mels": cfg.n_mels,
        "fmin": cfg.fmin, "fmax": cfg.fmax, "log_floor": cfg.log_floor,
    }


def _feature_config_from_json(data: dict) -> FeatureConfig:
    return FeatureConfig(
        n_fft=int(data["n_fft"]), hop=int(data["hop"]), n_mels=int(data["n_mels"]),
        fmin=float(data["fmin"]), fmax=float(data["fmax"]),
        log_floor=float(data["log_floor"]),
    )


def _cmd_synth(args) -> int:
    if args.kind == "machine":
        if args.condition not in condition_by_name:
            raise ConfigError(
                f"unknown condition {args.condition!r}; "
                f"use one of {sorted(condition_by_name)}"
            )
        clip = gen_machine_sound(
            args.machine, condition_by_name[args.condition],
            args.duration, args.sample_rate, args.seed,
        )
    else:
        clip = gen_noise(args.env, args.duration, args.sample_rate, args.seed)
    write_wav(args.out, clip)
    print(f"wrote {args.out} ({clip.duration_seconds:g} s @ {clip.sample_rate} Hz)")
    return 0


def _cmd_mix(args) -> int:
    signal = read_wav(args.signal)
    noise = read_wav(args.noise)
    mixed = mix_components(signal, noise, args.snr)
    write_wav(args.out, mixed.clip)
    achieved = measured_snr_db(mixed.signal_part, mixed.noise_part)
    print(f"wrote {args.out} (target {args.snr:g} dB, achieved {achieved:.9f} dB)")
    return 0


def _cmd_dataset(args) -> int:
    spec = SplitSpec.for_machine(
        args.machine, scale=args.scale, duration_s=args.duration,
        sample_rate=args.sample_rate,
    )
    source = None
    if args.pool is not None:
        source = ManifestSource.from_csv(args.pool, args.machine, args.seed)
    splits = build_splits(
        spec, args.env_train, args.env_test,
        snr_range=(args.snr_lo, args.snr_hi), seed=args.seed, source=source,
    )
    manifest = write_manifest(args.out, splits)
    print(
        f"wrote {manifest}: train {len(splits.train)}, "
        f"validation {len(splits.validation)}, test {len(splits.test)} clips"
    )
    return 0


def _cmd_train(args) -> int:
    splits = read_manifest(args.dataset)
    feature_config = _feature_config(args.features)
    technique = TechniqueConfig(parse_technique(args.technique))
    schedule = LrSchedule(base_lr=args.base_lr, final_lr=args.final_lr).scaled_to(args.epochs)
    run = TrainRun(
        technique=technique,
        splits=splits,
        feature_config=feature_config,
        epochs=args.epochs,
        batch_machine=args.batch_machine,
        batch_noise=args.batch_noise,
        seed=args.seed,
        schedule=schedule,
    )
    result = train(run)
    meta = {
        "epoch": result.best_epoch,
        "threshold": result.threshold,
        "technique": technique.kind.value,
        "seed": args.seed,
        "dataset": str(args.dataset),
        "feature_config": _feature_config_json(feature_config),
    }
    save_checkpoint(args.checkpoint, result.network, meta)
    print(
        f"best epoch {result.best_epoch}: validation macro F1 "
        f"{result.best_val_f1:.6f}"
        + ("" if result.threshold is None else f", threshold {result.threshold:.6g}")
    )
    print(f"wrote {args.checkpoint}")
    if args.history is not None:
        write_history_csv(result.history, args.history)
        print(f"wrote {args.history}")
    return 0


def _cmd_eval(args) -> int:
    network, meta, _ = load_checkpoint(args.checkpoint)
    splits = read_manifest(args.dataset)
    technique = TechniqueConfig(
        parse_technique(meta["technique"]), threshold=meta.get("threshold")
    )
    feature_config = _feature_config_from_json(meta["feature_config"])
    report = evaluate(network, technique, splits.split(args.split), feature_config)
    print(f"examples: {report.n_examples}")
    print(f"macro F1: {report.macro_f1:.6f}")
    print(f"noise F1: {report.noise_f1:.6f}")
    if args.per_class:
        width = max(len(name) for name in report.labels)
        for name, value in zip(report.labels, report.class_f1):
            print(f"  {name:<{width}}  {value:.6f}")
    return 0


def _cmd_experiment(args) -> int:
    with open(args.config) as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"cannot parse {args.config}: {exc}") from exc
    spec = ExperimentSpec.from_json(data)
    progress = None
    if not args.quiet:
        def progress(done, total):
            print(f"cell {done}/{total} finished", file=sys.stderr)
    table = run_experiment(spec, workers=args.workers, progress=progress)
    paths = write_reports(table, args.out)
    print(emit_table(table, "markdown"), end="")
    print(f"wrote {paths['runs']}, {paths['summary_csv']}, {paths['summary_md']}")
    return 0


def _cmd_report(args) -> int:
    directory = Path(args.results)
    spec_path = directory / "experiment.json"
    runs_path = directory / "runs.csv"
    if not spec_path.exists() or not runs_path.exists():
        raise DataError(
            f"{directory} does not look like an experiment output "
            f"(need experiment.json and runs.csv)"
        )
    with open(spec_path) as handle:
        spec = ExperimentSpec.from_json(json.load(handle))
    rows = []
    with open(runs_path, newline="") as handle:
        for row in csv.DictReader(handle):
            rows.append(
                ResultRow(
                    env_train=row["train_env"],
                    env_test=row["test_env"],
                    technique=row["technique"],
                    seed=int(row["seed"]),
                    macro_f1=float(row["macro_f1"]),
                    noise_f1=float(row["noise_f1"]),
                    threshold=float(row["threshold"]) if row["threshold"] else None,
                    best_epoch=int(row["best_epoch"]),
                    best_val_f1=float(row["best_val_f1"]),
                )
            )
    print(emit_table(ResultTable(spec=spec, rows=tuple(rows)), args.format), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisefault",
        description="Noise-robust machine-fault classification pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate one synthetic clip")
    p.add_argument("--kind", choices=["machine", "noise"], required=True)
    p.add_argument("--machine", choices=list(MACHINES), default="car")
    p.add_argument("--condition", default="normal",
                   help="machine condition name, e.g. normal or fault_a_low")
    p.add_argument("--env", choices=_ENV_CHOICES, default="N1")
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("mix", help="mix a noise WAV into a signal WAV at an SNR")
    p.add_argument("--signal", required=True)
    p.add_argument("--noise", required=True)
    p.add_argument("--snr", type=float, required=True, help="target SNR in dB")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mix)

    p = sub.add_parser("dataset", help="build train/validation/test splits")
    p.add_argument("--machine", choices=list(MACHINES), default="car")
    p.add_argument("--scale", type=float, default=0.1,
                   help="fraction of the full split sizes")
    p.add_argument("--env-train", choices=_ENV_CHOICES, required=True)
    p.add_argument("--env-test", choices=_ENV_CHOICES, required=True)
    p.add_argument("--snr-lo", type=float, default=-10.0)
    p.add_argument("--snr-hi", type=float, default=0.0)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool", default=None,
                   help="pool manifest CSV of real recordings to draw from "
                        "instead of the synthesizer")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_dataset)

    p = sub.add_parser("train", help="train one model on a built dataset")
    p.add_argument("--dataset", required=True, help="split manifest CSV")
    p.add_argument("--technique", required=True,
                   choices=sorted(TECHNIQUE_ALIASES), help="noise-handling technique")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--batch-machine", type=int, default=8)
    p.add_argument("--batch-noise", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-lr", type=float, default=1e-3)
    p.add_argument("--final-lr", type=float, default=1e-4)
    p.add_argument("--features", choices=["desk", "full"], default="desk")
    p.add_argument("--checkpoint", required=True, help="output checkpoint (.npz)")
    p.add_argument("--history", default=None, help="optional history CSV")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="split manifest CSV")
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--per-class", action="store_true", help="print per-class F1")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="run a full experiment from a JSON spec")
    p.add_argument("--config", required=True, help="experiment spec JSON")
    p.add_argument("--out", required=True, help="output directory for reports")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel worker processes (default NOISEFAULT_WORKERS or 1)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("report", help="re-render tables from experiment output")
    p.add_argument("--results", required=True, help="experiment output directory")
    p.add_argument("--format", choices=["csv", "markdown"], default="markdown")
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NoiseFaultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except (ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code


if __name__ == "__main__":
    sys.exit(main())
