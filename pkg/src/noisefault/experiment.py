"""Experiment protocols and report tables.

Three protocols cover the interesting train/test noise-environment
relations:

* same-env: train and test noise come from the same environment
  (disjoint clips), one assignment per environment.
* unseen-env: test noise comes from a different environment than
  train/validation noise; defaults to all ordered pairs.
* exposure-grid: the full 4x4 grid of (train env, test env); the diagonal
  is on-site exposure, off-diagonals other-site exposure.

Each (environment assignment, seed) pair builds one dataset that every
technique in the experiment shares, so per-technique comparisons see
identical data. Reports are plain CSV/Markdown with fixed ordering and
formatting, so rerunning an identical spec reproduces them byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from enum import Enum
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .data import SplitSpec, build_splits
from .errors import ConfigError
from .features import FeatureConfig
from .net import LrSchedule
from .synth import MACHINES, NoiseEnvironment
from .techniques import Technique, TechniqueConfig, parse_technique
from .train import TrainRun, evaluate, train

ALL_ENVS = tuple(NoiseEnvironment)


class Protocol(str, Enum):
    SAME_ENV = "same-env"
    UNSEEN_ENV = "unseen-env"
    EXPOSURE_GRID = "exposure-grid"


_DEFAULT_TECHNIQUES = {
    Protocol.SAME_ENV: tuple(Technique),
    Protocol.UNSEEN_ENV: tuple(Technique),
    Protocol.EXPOSURE_GRID: (Technique.NOISE_EXPOSURE,),
}


def _default_pairs(protocol: Protocol) -> tuple:
    if protocol is Protocol.SAME_ENV:
        return tuple((env, env) for env in ALL_ENVS)
    if protocol is Protocol.UNSEEN_ENV:
        return tuple(
            (a, b) for a in ALL_ENVS for b in ALL_ENVS if a is not b
        )
    return tuple((a, b) for a in ALL_ENVS for b in ALL_ENVS)


@dataclass(frozen=True)
class ExperimentSpec:
    """A full experiment: protocol, data scale, techniques, seeds."""

    protocol: Protocol
    machine: str = "car"
    env_pairs: tuple | None = None
    techniques: tuple | None = None
    seeds: tuple = (0, 1, 2)
    scale: float = 0.1
    snr_range: tuple = (-10.0, 0.0)
    duration_s: float = 2.0
    sample_rate: int = 8000
    epochs: int = 40
    batch_machine: int = 8
    batch_noise: int = 8
    base_lr: float = 1e-3
    final_lr: float = 1e-4

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if self.machine not in MACHINES:
            raise ConfigError(f"unknown machine {self.machine!r}; use one of {MACHINES}")
        if self.techniques is None:
            object.__setattr__(
                self, "techniques", _DEFAULT_TECHNIQUES[self.protocol]
            )
        else:
            object.__setattr__(
                self, "techniques", tuple(parse_technique(t) for t in self.techniques)
            )
        if not self.seeds:
            raise ConfigError("need at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        pairs = self.env_pairs
        if pairs is None:
            pairs = _default_pairs(self.protocol)
        else:
            pairs = tuple(
                (NoiseEnvironment(a), NoiseEnvironment(b)) for a, b in pairs
            )
        for env_train, env_test in pairs:
            if self.protocol is Protocol.SAME_ENV and env_train is not env_test:
                raise ConfigError(
                    f"same-env protocol requires train env == test env, "
                    f"got {env_train.value}/{env_test.value}"
                )
            if self.protocol is Protocol.UNSEEN_ENV and env_train is env_test:
                raise ConfigError(
                    f"unseen-env protocol requires train env != test env, "
                    f"got {env_train.value}/{env_test.value}"
                )
        object.__setattr__(self, "env_pairs", pairs)
        if not 0 < self.scale:
            raise ConfigError(f"scale must be positive, got {self.scale}")

    def assignments(self) -> tuple:
        """(env_train, env_test) pairs in report order."""
        return self.env_pairs

    def split_spec(self) -> SplitSpec:
        return SplitSpec.for_machine(
            self.machine, scale=self.scale, duration_s=self.duration_s,
            sample_rate=self.sample_rate,
        )

    def n_runs(self) -> int:
        return len(self.env_pairs) * len(self.techniques) * len(self.seeds)

    def to_json(self) -> dict:
        return {
            "protocol": self.protocol.value,
            "machine": self.machine,
            "env_pairs": [[a.value, b.value] for a, b in self.env_pairs],
            "techniques": [t.value for t in self.techniques],
            "seeds": list(self.seeds),
            "scale": self.scale,
            "snr_range": list(self.snr_range),
            "duration_s": self.duration_s,
            "sample_rate": self.sample_rate,
            "epochs": self.epochs,
            "batch_machine": self.batch_machine,
            "batch_noise": self.batch_noise,
            "base_lr": self.base_lr,
            "final_lr": self.final_lr,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ExperimentSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown experiment fields: {sorted(unknown)}")
        if "protocol" not in data:
            raise ConfigError("experiment config needs a 'protocol' field")
        kwargs = dict(data)
        try:
            kwargs["protocol"] = Protocol(kwargs["protocol"])
        except ValueError as exc:
            raise ConfigError(
                f"unknown protocol {kwargs['protocol']!r}; "
                f"use one of {[p.value for p in Protocol]}"
            ) from exc
        for key in ("env_pairs", "techniques", "seeds", "snr_range"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(
                    tuple(v) if isinstance(v, list) else v for v in kwargs[key]
                )
        return cls(**kwargs)


@dataclass(frozen=True)
class ResultRow:
    """One training run's evaluation on its designated test split."""

    env_train: str
    env_test: str
    technique: str
    seed: int
    macro_f1: float
    noise_f1: float
    threshold: float | None
    best_epoch: int
    best_val_f1: float


def _as_value(key) -> str:
    return str(key.value) if hasattr(key, "value") else str(key)


@dataclass(frozen=True)
class ResultTable:
    spec: ExperimentSpec
    rows: tuple

    def _cell(self, env_train, env_test, technique) -> list:
        env_train, env_test = _as_value(env_train), _as_value(env_test)
        technique = _as_value(technique)
        picked = [
            r
            for r in self.rows
            if r.env_train == env_train
            and r.env_test == env_test
            and r.technique == technique
        ]
        if len(picked) != len(self.spec.seeds):
            raise ConfigError(
                f"table incomplete for ({env_train}, {env_test}, {technique}): "
                f"{len(picked)} of {len(self.spec.seeds)} seeds present"
            )
        return picked

    def mean_macro_f1(self, env_train, env_test, technique) -> float:
        return float(np.mean([r.macro_f1 for r in self._cell(env_train, env_test, technique)]))

    def mean_noise_f1(self, env_train, env_test, technique) -> float:
        return float(np.mean([r.noise_f1 for r in self._cell(env_train, env_test, technique)]))


def _run_cell(args):
    """Train every technique of the experiment on one (assignment, seed)
    dataset; module-level so worker processes can import it."""
    spec, env_train, env_test, seed = args
    splits = build_splits(
        spec.split_spec(), env_train, env_test,
        snr_range=spec.snr_range, seed=seed,
    )
    schedule = LrSchedule(base_lr=spec.base_lr, final_lr=spec.final_lr).scaled_to(spec.epochs)
    feature_config = FeatureConfig()
    rows = []
    for technique in spec.techniques:
        run = TrainRun(
            technique=TechniqueConfig(technique),
            splits=splits,
            feature_config=feature_config,
            epochs=spec.epochs,
            batch_machine=spec.batch_machine,
            batch_noise=spec.batch_noise,
            seed=seed,
            schedule=schedule,
        )
        result = train(run)
        report = evaluate(result.network, result.technique, splits.test, feature_config)
        rows.append(
            ResultRow(
                env_train=env_train.value,
                env_test=env_test.value,
                technique=technique.value,
                seed=seed,
                macro_f1=report.macro_f1,
                noise_f1=report.noise_f1,
                threshold=result.threshold,
                best_epoch=result.best_epoch,
                best_val_f1=result.best_val_f1,
            )
        )
    return rows


def worker_count(explicit: int | None = None) -> int:
    """Worker processes to use: explicit argument, else the
    NOISEFAULT_WORKERS environment variable, else 1 (sequential)."""
    if explicit is not None:
        value = explicit
    else:
        raw = os.environ.get("NOISEFAULT_WORKERS", "1")
        try:
            value = int(raw)
        except ValueError as exc:
            raise ConfigError(f"NOISEFAULT_WORKERS must be an integer, got {raw!r}") from exc
    if value < 1:
        raise ConfigError(f"worker count must be >= 1, got {value}")
    return value


def run_experiment(spec: ExperimentSpec, workers: int | None = None,
                   progress=None) -> ResultTable:
    """Execute all runs of the experiment.

    Jobs are (environment assignment, seed) cells; techniques within a
    cell share its dataset. Results are assembled in spec order no matter
    how many workers ran them, so the table is deterministic.
    """
    jobs = [
        (spec, env_train, env_test, seed)
        for env_train, env_test in spec.assignments()
        for seed in spec.seeds
    ]
    n_workers = worker_count(workers)
    if n_workers == 1 or len(jobs) == 1:
        results = []
        for job in jobs:
            results.append(_run_cell(job))
            if progress is not None:
                progress(len(results), len(jobs))
    else:
        with get_context("fork").Pool(min(n_workers, len(jobs))) as pool:
            results = pool.map(_run_cell, jobs, chunksize=1)
    rows = [row for cell in results for row in cell]
    return ResultTable(spec=spec, rows=tuple(rows))


def _fmt(value: float) -> str:
    return "%.6f" % value


def _aggregate(table: ResultTable):
    """Rows of (env_train, env_test, [mean macro F1 per technique])."""
    spec = table.spec
    out = []
    for env_train, env_test in spec.assignments():
        means = [
            table.mean_macro_f1(env_train, env_test, t) for t in spec.techniques
        ]
        out.append((env_train.value, env_test.value, means))
    return out


def emit_table(table: ResultTable, fmt: str = "markdown") -> str:
    """Aggregate comparison table, one row per environment assignment.

    Cells are mean macro F1 over seeds, printed with six decimals. The
    best cell of each row is flagged: bold in markdown, listed in a
    trailing `best` column in CSV. Ties flag every winner.
    """
    spec = table.spec
    aggregated = _aggregate(table)
    technique_names = [t.value for t in spec.techniques]
    if fmt == "csv":
        lines = [",".join(["train_env", "validation_env", "test_env"] + technique_names + ["best"])]
        for env_train, env_test, means in aggregated:
            formatted = [_fmt(m) for m in means]
            top = max(formatted, key=float)
            best = "+".join(
                name for name, value in zip(technique_names, formatted) if value == top
            )
            lines.append(",".join([env_train, env_train, env_test] + formatted + [best]))
        return "\n".join(lines) + "\n"
    if fmt == "markdown":
        header = ["train env", "validation env", "test env"] + technique_names
        lines = [
            "| " + " | ".join(header) + " |",
            "|" + "|".join([" --- "] * len(header)) + "|",
        ]
        for env_train, env_test, means in aggregated:
            formatted = [_fmt(m) for m in means]
            top = max(formatted, key=float)
            cells = [
                f"**{value}**" if value == top else value for value in formatted
            ]
            lines.append("| " + " | ".join([env_train, env_train, env_test] + cells) + " |")
        return "\n".join(lines) + "\n"
    raise ConfigError(f"unknown table format {fmt!r}; use 'csv' or 'markdown'")


def emit_runs_csv(table: ResultTable) -> str:
    """Every individual run as one CSV row (no aggregation)."""
    lines = [
        "train_env,validation_env,test_env,technique,seed,macro_f1,noise_f1,threshold,best_epoch,best_val_f1"
    ]
    for r in table.rows:
        lines.append(
            ",".join(
                [
                    r.env_train,
                    r.env_train,
                    r.env_test,
                    r.technique,
                    str(r.seed),
                    _fmt(r.macro_f1),
                    _fmt(r.noise_f1),
                    "" if r.threshold is None else repr(r.threshold),
                    str(r.best_epoch),
                    _fmt(r.best_val_f1),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def write_reports(table: ResultTable, directory) -> dict:
    """Write runs.csv, summary.csv, summary.md, and the spec snapshot.

    Output bytes depend only on the table contents, so identical
    experiments rewrite identical files.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "runs": directory / "runs.csv",
        "summary_csv": directory / "summary.csv",
        "summary_md": directory / "summary.md",
        "spec": directory / "experiment.json",
    }
    paths["runs"].write_bytes(emit_runs_csv(table).encode())
    paths["summary_csv"].write_bytes(emit_table(table, "csv").encode())
    paths["summary_md"].write_bytes(emit_table(table, "markdown").encode())
    paths["spec"].write_bytes(
        (json.dumps(table.spec.to_json(), indent=2, sort_keys=True) + "\n").encode()
    )
    return paths
