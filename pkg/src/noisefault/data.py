"""Dataset assembly: SNR mixing, split construction, batches, manifests.

A dataset is three splits (train/validation/test) of labeled examples.
Machine examples are clean synthetic machine sounds mixed with
environment noise at a per-example SNR drawn once and frozen; noise
examples are noise-only clips. Train and validation share one noise
environment, the test split takes its own, so unseen-environment
evaluation is a matter of picking different environments.

Split sizes follow a fixed structure per machine: each of the 12 fault
conditions contributes `per_fault` clips, the normal condition four times
that, and the noise family as many clips as all machine conditions
combined (16x per_fault). A scale factor shrinks everything
proportionally for fast desk runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .audio import AudioClip, read_wav, rms, time_shift, write_wav
from .errors import ConfigError, DataError
from .synth import (
    ALL_CONDITIONS,
    MACHINES,
    N_CONDITIONS,
    MachineCondition,
    NoiseEnvironment,
    condition_by_name,
    gen_machine_sound,
    gen_noise,
)

# 14-way label set: the 13 machine conditions by index, then noise.
LABELS = tuple(c.name for c in ALL_CONDITIONS) + ("noise",)
NOISE_LABEL_INDEX = N_CONDITIONS
N_LABELS = len(LABELS)

SPLIT_NAMES = ("train", "validation", "test")

_SOURCE_STREAM = 0x4453
_SNR_STREAM = 0x534E
_BATCH_STREAM = 0x4241
_AUG_STREAM = 0x4155

_ROLE_IDS = {"machine": 0, "mix_noise": 1, "noise_only": 2}


def snr_gain(signal_rms: float, noise_rms: float, snr_db: float) -> float:
    """Gain applied to the noise so the mixture hits the requested SNR."""
    if signal_rms <= 0 or noise_rms <= 0:
        raise DataError("cannot mix silent audio (zero RMS)")
    return signal_rms / (noise_rms * 10.0 ** (snr_db / 20.0))


def measured_snr_db(signal_part: AudioClip, noise_part: AudioClip) -> float:
    """SNR implied by two already-mixed addends, in dB."""
    return 20.0 * np.log10(rms(signal_part) / rms(noise_part))


@dataclass(frozen=True)
class MixedClip:
    """A mixture plus the addends it was built from, for SNR auditing."""

    clip: AudioClip
    signal_part: AudioClip
    noise_part: AudioClip
    snr_db: float


def mix_components(signal: AudioClip, noise: AudioClip, snr_db: float) -> MixedClip:
    """Mix noise into signal at snr_db, keeping the (possibly rescaled)
    addends.

    If the mixture peaks above full scale the whole clip and both addends
    are rescaled to peak 1, which leaves the SNR untouched. snr_db of
    +inf (or None) means no noise at all.
    """
    if snr_db is None or snr_db == np.inf:
        return MixedClip(signal, signal, noise.scaled(0.0), np.inf)
    if len(signal) != len(noise):
        raise DataError(
            f"signal and noise lengths differ: {len(signal)} vs {len(noise)}"
        )
    if signal.sample_rate != noise.sample_rate:
        raise DataError(
            f"signal and noise sample rates differ: "
            f"{signal.sample_rate} vs {noise.sample_rate}"
        )
    gain = snr_gain(rms(signal), rms(noise), snr_db)
    scaled_noise = noise.scaled(gain)
    mixed = signal.samples + scaled_noise.samples
    peak = np.abs(mixed).max()
    signal_part = signal
    if peak > 1.0:
        mixed = mixed / peak
        signal_part = signal.scaled(1.0 / peak)
        scaled_noise = scaled_noise.scaled(1.0 / peak)
    check = measured_snr_db(signal_part, scaled_noise)
    if abs(check - snr_db) > 1e-9:
        raise DataError(
            f"mixture SNR {check} dB deviates from requested {snr_db} dB"
        )
    return MixedClip(AudioClip(mixed, signal.sample_rate), signal_part, scaled_noise, snr_db)


def mix_at_snr(signal: AudioClip, noise: AudioClip, snr_db: float) -> AudioClip:
    """Mix noise into signal at the requested SNR; see mix_components."""
    return mix_components(signal, noise, snr_db).clip


def augment_noise(clip: AudioClip, shift_s: float, gain: float) -> AudioClip:
    """Training-time noise augmentation: circular time shift then gain."""
    if not 0.0 <= shift_s <= 2.0:
        raise ConfigError(f"time shift must lie in [0, 2] s, got {shift_s}")
    if not 0.5 <= gain <= 2.0:
        raise ConfigError(f"gain must lie in [0.5, 2], got {gain}")
    return time_shift(clip, shift_s).scaled(gain)


def draw_augmentation(seed: int, epoch: int, index: int, max_shift_s: float):
    """Per-(epoch, clip) augmentation parameters, stable under replay."""
    rng = np.random.default_rng(np.random.SeedSequence([_AUG_STREAM, seed, epoch, index]))
    shift = rng.uniform(0.0, min(2.0, max_shift_s))
    gain = rng.uniform(0.5, 2.0)
    return shift, gain


@dataclass(frozen=True)
class SplitCounts:
    """Clip counts for one split, all derived from the per-fault count."""

    per_fault: int

    def __post_init__(self):
        if self.per_fault < 1:
            raise ConfigError(f"per-fault count must be >= 1, got {self.per_fault}")

    @property
    def normal(self) -> int:
        return 4 * self.per_fault

    @property
    def fault_total(self) -> int:
        return (N_CONDITIONS - 1) * self.per_fault

    @property
    def machine_total(self) -> int:
        return self.normal + self.fault_total

    @property
    def noise(self) -> int:
        return self.machine_total

    def for_condition(self, condition: MachineCondition) -> int:
        return self.normal if condition.kind == "normal" else self.per_fault


# Full-sized per-fault counts (train, validation, test) per machine.
TABLE_PER_FAULT = {"car": (50, 25, 25), "train": (120, 40, 40)}


@dataclass(frozen=True)
class SplitSpec:
    """Which machine, how many clips per split, and the clip format."""

    machine: str
    train: SplitCounts
    validation: SplitCounts
    test: SplitCounts
    duration_s: float = 2.0
    sample_rate: int = 8000
    scale_factor: float = 1.0

    def __post_init__(self):
        if self.machine not in MACHINES:
            raise ConfigError(f"unknown machine {self.machine!r}; use one of {MACHINES}")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ConfigError("duration and sample rate must be positive")

    @classmethod
    def for_machine(
        cls,
        machine: str,
        scale: float = 1.0,
        duration_s: float = 2.0,
        sample_rate: int = 8000,
    ) -> "SplitSpec":
        if machine not in TABLE_PER_FAULT:
            raise ConfigError(f"unknown machine {machine!r}; use one of {MACHINES}")
        if scale <= 0:
            raise ConfigError(f"scale must be positive, got {scale}")
        counts = [
            SplitCounts(max(1, round(base * scale))) for base in TABLE_PER_FAULT[machine]
        ]
        return cls(machine, *counts, duration_s=duration_s, sample_rate=sample_rate,
                   scale_factor=scale)

    def counts_for(self, split: str) -> SplitCounts:
        if split not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {split!r}; use one of {SPLIT_NAMES}")
        return getattr(self, "validation" if split == "validation" else split)

    def scaled(self, factor: float) -> "SplitSpec":
        """Rescale all counts by factor relative to this spec."""
        if factor <= 0:
            raise ConfigError(f"scale must be positive, got {factor}")
        return replace(
            self,
            train=SplitCounts(max(1, round(self.train.per_fault * factor))),
            validation=SplitCounts(max(1, round(self.validation.per_fault * factor))),
            test=SplitCounts(max(1, round(self.test.per_fault * factor))),
            scale_factor=self.scale_factor * factor,
        )


@dataclass(frozen=True)
class LabeledExample:
    """One dataset item: a clip plus its 14-way label.

    Machine examples keep the clean signal and the scaled noise they were
    mixed from, so the recorded SNR can be re-audited; noise examples
    carry neither components nor an SNR.
    """

    clip: AudioClip
    label_index: int
    env: NoiseEnvironment
    clip_id: str
    snr_db: float | None = None
    signal_part: AudioClip | None = None
    noise_part: AudioClip | None = None

    def __post_init__(self):
        if not 0 <= self.label_index < N_LABELS:
            raise ValueError(f"label index {self.label_index} outside [0, {N_LABELS})")
        if self.is_noise and self.snr_db is not None:
            raise ValueError("noise examples carry no SNR")
        if not self.is_noise and self.snr_db is None:
            raise ValueError("machine examples must record their mixing SNR")

    @property
    def is_noise(self) -> bool:
        return self.label_index == NOISE_LABEL_INDEX

    @property
    def label(self) -> str:
        return LABELS[self.label_index]


class SynthSource:
    """Generates clips on demand from the synthetic generator.

    Every clip's randomness is keyed by (master seed, split, role, group,
    index), so any clip can be regenerated independently and no clip is
    shared between splits or roles.
    """

    def __init__(self, machine: str, duration_s: float, sample_rate: int,
                 seed: int, config: dict | None = None):
        if machine not in MACHINES:
            raise ConfigError(f"unknown machine {machine!r}; use one of {MACHINES}")
        self.machine = machine
        self.duration_s = duration_s
        self.sample_rate = sample_rate
        self.seed = seed
        self.config = config

    def _child_seed(self, split: str, role: str, group_id: int, index: int) -> int:
        key = [
            _SOURCE_STREAM,
            self.seed,
            SPLIT_NAMES.index(split),
            _ROLE_IDS[role],
            group_id,
            index,
        ]
        return int(np.random.SeedSequence(key).generate_state(1, np.uint64)[0])

    def clips(self, split: str, role: str, group: str, count: int):
        """Return `count` (clip_id, AudioClip) pairs for the request.

        role "machine" draws clean machine sounds for condition `group`;
        "mix_noise" and "noise_only" draw independent noise clips for
        environment `group`.
        """
        out = []
        if role == "machine":
            condition = condition_by_name[group]
            for i in range(count):
                seed = self._child_seed(split, role, condition.index, i)
                clip = gen_machine_sound(
                    self.machine, condition, self.duration_s, self.sample_rate,
                    seed, config=self.config,
                )
                out.append((f"synth:{self.machine}:{split}:{role}:{group}:{i}", clip))
        elif role in ("mix_noise", "noise_only"):
            env = NoiseEnvironment(group)
            for i in range(count):
                seed = self._child_seed(split, role, env.index, i)
                clip = gen_noise(env, self.duration_s, self.sample_rate, seed,
                                 config=self.config)
                out.append((f"synth:{self.machine}:{split}:{role}:{group}:{i}", clip))
        else:
            raise ConfigError(f"unknown clip role {role!r}")
        return out


class ManifestSource:
    """Serves clips from a user-provided pool manifest instead of the
    synthesizer, for ingesting pre-recorded machine/noise audio.

    The pool manifest is a CSV with header path,kind,condition,env where
    kind is "machine" (condition set, env empty) or "noise" (env set).
    Paths are resolved relative to the manifest file. Each pool is
    shuffled once with the build seed and consumed sequentially, so
    repeated requests never hand out the same file twice.
    """

    def __init__(self, machine: str, pools: dict, seed: int, root: Path):
        self.machine = machine
        self.seed = seed
        self.root = root
        self._pools = {}
        rng = np.random.default_rng(np.random.SeedSequence([_SOURCE_STREAM, seed]))
        for key in sorted(pools):
            paths = sorted(pools[key])
            order = rng.permutation(len(paths))
            self._pools[key] = [paths[i] for i in order]
        self._cursors = {key: 0 for key in self._pools}

    @classmethod
    def from_csv(cls, path, machine: str, seed: int) -> "ManifestSource":
        path = Path(path)
        pools: dict = {}
        try:
            with open(path, newline="") as handle:
                reader = csv.DictReader(handle)
                required = {"path", "kind", "condition", "env"}
                if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                    raise DataError(
                        f"pool manifest {path} must have columns {sorted(required)}"
                    )
                for row in reader:
                    kind = row["kind"].strip()
                    if kind == "machine":
                        name = row["condition"].strip()
                        if name not in condition_by_name:
                            raise DataError(f"unknown condition {name!r} in {path}")
                        key = ("machine", name)
                    elif kind == "noise":
                        env = NoiseEnvironment(row["env"].strip())
                        key = ("noise", env.value)
                    else:
                        raise DataError(f"unknown kind {kind!r} in {path}")
                    pools.setdefault(key, []).append(row["path"].strip())
        except FileNotFoundError:
            raise
        except csv.Error as exc:
            raise DataError(f"cannot parse pool manifest {path}: {exc}") from exc
        return cls(machine, pools, seed, path.parent)

    def _take(self, key, count: int):
        pool = self._pools.get(key, [])
        cursor = self._cursors.get(key, 0)
        if cursor + count > len(pool):
            raise DataError(
                f"pool {key} exhausted: need {count} more clips, "
                f"have {len(pool) - cursor} of {len(pool)} left"
            )
        self._cursors[key] = cursor + count
        return pool[cursor : cursor + count]

    def clips(self, split: str, role: str, group: str, count: int):
        if role == "machine":
            key = ("machine", group)
        elif role in ("mix_noise", "noise_only"):
            key = ("noise", NoiseEnvironment(group).value)
        else:
            raise ConfigError(f"unknown clip role {role!r}")
        out = []
        for rel in self._take(key, count):
            clip = read_wav(self.root / rel)
            out.append((rel, clip))
        return out


@dataclass(frozen=True)
class Splits:
    """The three assembled splits plus how they were built."""

    train: tuple
    validation: tuple
    test: tuple
    machine: str | None = None
    env_train: NoiseEnvironment | None = None
    env_test: NoiseEnvironment | None = None
    snr_range: tuple | None = None
    seed: int | None = None

    def split(self, name: str) -> tuple:
        if name not in SPLIT_NAMES:
            raise ConfigError(f"unknown split {name!r}; use one of {SPLIT_NAMES}")
        return getattr(self, name)


def machine_examples(examples) -> list:
    return [e for e in examples if not e.is_noise]


def noise_examples(examples) -> list:
    return [e for e in examples if e.is_noise]


def build_splits(
    spec: SplitSpec,
    env_train: NoiseEnvironment | str,
    env_test: NoiseEnvironment | str,
    snr_range=(-10.0, 0.0),
    seed: int = 0,
    source=None,
) -> Splits:
    """Assemble the three splits.

    Machine clips are mixed with environment noise at an SNR drawn
    uniformly from snr_range, once, at build time; the drawn value is
    frozen into the example. Train and validation use env_train, test
    uses env_test. `source` defaults to the synthetic generator but any
    object with the same `clips` method (e.g. ManifestSource) works.
    """
    env_train = NoiseEnvironment(env_train)
    env_test = NoiseEnvironment(env_test)
    lo, hi = float(snr_range[0]), float(snr_range[1])
    if lo > hi:
        raise ConfigError(f"SNR range must satisfy lo <= hi, got [{lo}, {hi}]")
    if source is None:
        source = SynthSource(spec.machine, spec.duration_s, spec.sample_rate, seed)

    built = {}
    for split_id, split_name in enumerate(SPLIT_NAMES):
        env = env_test if split_name == "test" else env_train
        counts = spec.counts_for(split_name)
        examples = []
        for condition in ALL_CONDITIONS:
            n = counts.for_condition(condition)
            clean = source.clips(split_name, "machine", condition.name, n)
            noises = source.clips(split_name, "mix_noise", env.value, n)
            snr_rng = np.random.default_rng(
                np.random.SeedSequence([_SNR_STREAM, seed, split_id, condition.index])
            )
            snrs = snr_rng.uniform(lo, hi, n)
            for (clip_id, signal), (_, noise), snr_db in zip(clean, noises, snrs):
                mixed = mix_components(signal, noise, float(snr_db))
                examples.append(
                    LabeledExample(
                        clip=mixed.clip,
                        label_index=condition.index,
                        env=env,
                        clip_id=clip_id,
                        snr_db=float(snr_db),
                        signal_part=mixed.signal_part,
                        noise_part=mixed.noise_part,
                    )
                )
        for clip_id, clip in source.clips(split_name, "noise_only", env.value, counts.noise):
            # Same full-scale convention as the mixtures: clips that peak
            # above 1 are rescaled so they survive WAV storage unclipped.
            peak = np.abs(clip.samples).max()
            if peak > 1.0:
                clip = clip.scaled(1.0 / peak)
            examples.append(
                LabeledExample(clip=clip, label_index=NOISE_LABEL_INDEX, env=env,
                               clip_id=clip_id)
            )
        built[split_name] = tuple(examples)

    all_ids = [e.clip_id for name in SPLIT_NAMES for e in built[name]]
    if len(set(all_ids)) != len(all_ids):
        raise DataError("clip identities collide across splits")
    return Splits(
        built["train"], built["validation"], built["test"],
        machine=spec.machine, env_train=env_train, env_test=env_test,
        snr_range=(lo, hi), seed=seed,
    )


def steps_per_epoch(n_machine: int, batch_machine: int) -> int:
    """Full machine batches per epoch; a trailing partial batch is dropped."""
    if batch_machine < 1:
        raise ConfigError(f"machine batch size must be >= 1, got {batch_machine}")
    return n_machine // batch_machine


def _family_permutation(n: int, seed: int, epoch: int, family: int, block: int):
    rng = np.random.default_rng(
        np.random.SeedSequence([_BATCH_STREAM, seed, epoch, family, block])
    )
    return rng.permutation(n)


def sample_batch(examples, b_m: int, b_n: int, seed: int, epoch: int, step: int):
    """Deterministic training batch: (machine examples, noise examples).

    Within an epoch, machine examples are drawn without replacement from a
    per-epoch permutation; an epoch covers the machine family, so `step`
    must stay below steps_per_epoch. Noise examples cycle through their own
    permutations, reshuffled on every wrap, so arbitrarily many steps are
    served without replacement inside each pass.
    """
    machines = machine_examples(examples)
    noises = noise_examples(examples)
    if b_m < 1:
        raise ConfigError("machine batch size must be >= 1")
    if b_m > len(machines):
        raise DataError(
            f"machine batch {b_m} exceeds machine population {len(machines)}"
        )
    if b_n > len(noises):
        raise DataError(f"noise batch {b_n} exceeds noise population {len(noises)}")
    if step < 0 or step >= steps_per_epoch(len(machines), b_m):
        raise ConfigError(
            f"step {step} outside epoch of {steps_per_epoch(len(machines), b_m)} steps"
        )
    perm = _family_permutation(len(machines), seed, epoch, 0, 0)
    chunk = perm[step * b_m : (step + 1) * b_m]
    machine_batch = [machines[i] for i in chunk]

    noise_batch = []
    if b_n:
        n = len(noises)
        start = step * b_n
        for pos in range(start, start + b_n):
            block, offset = divmod(pos, n)
            perm_n = _family_permutation(n, seed, epoch, 1, block)
            noise_batch.append(noises[perm_n[offset]])
    return machine_batch, noise_batch


def write_manifest(directory, splits: Splits) -> Path:
    """Persist built splits as WAV files plus a split manifest CSV.

    The manifest has columns path,label,env,snr_db,split; noise rows leave
    snr_db empty. Returns the manifest path.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest_path = directory / "manifest.csv"
    rows = []
    for split_name in SPLIT_NAMES:
        for i, example in enumerate(splits.split(split_name)):
            rel = Path(split_name) / f"{i:05d}_{example.label}.wav"
            (directory / split_name).mkdir(exist_ok=True)
            write_wav(directory / rel, example.clip)
            rows.append(
                {
                    "path": str(rel),
                    "label": example.label,
                    "env": example.env.value,
                    "snr_db": "" if example.snr_db is None else repr(example.snr_db),
                    "split": split_name,
                }
            )
    with open(manifest_path, "w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=["path", "label", "env", "snr_db", "split"])
        writer.writeheader()
        writer.writerows(rows)
    return manifest_path


def read_manifest(manifest_path) -> Splits:
    """Load previously written splits back from a split manifest CSV."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    label_to_index = {name: i for i, name in enumerate(LABELS)}
    collected = {name: [] for name in SPLIT_NAMES}
    with open(manifest_path, newline="") as handle:
        reader = csv.DictReader(handle)
        required = {"path", "label", "env", "snr_db", "split"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(
                f"split manifest {manifest_path} must have columns {sorted(required)}"
            )
        for row in reader:
            split_name = row["split"].strip()
            if split_name not in SPLIT_NAMES:
                raise DataError(f"unknown split {split_name!r} in {manifest_path}")
            label = row["label"].strip()
            if label not in label_to_index:
                raise DataError(f"unknown label {label!r} in {manifest_path}")
            snr_text = row["snr_db"].strip()
            collected[split_name].append(
                LabeledExample(
                    clip=read_wav(root / row["path"].strip()),
                    label_index=label_to_index[label],
                    env=NoiseEnvironment(row["env"].strip()),
                    clip_id=row["path"].strip(),
                    snr_db=float(snr_text) if snr_text else None,
                )
            )
    envs = {name: {e.env for e in collected[name]} for name in SPLIT_NAMES}
    env_train = next(iter(envs["train"])) if len(envs["train"]) == 1 else None
    env_test = next(iter(envs["test"])) if len(envs["test"]) == 1 else None
    return Splits(
        tuple(collected["train"]), tuple(collected["validation"]), tuple(collected["test"]),
        env_train=env_train, env_test=env_test,
    )
