"""Deterministic synthetic corpus: machine sounds and environment noises.

Thirteen machine conditions exist per machine (one normal plus four fault
types at three damage levels each). A condition is rendered as a harmonic
stack at a machine-specific fundamental; a fault adds inharmonic partials
and amplitude flutter whose strength grows with damage level. Environment
noises N1..N4 are broadband noise shaped by four fixed, clearly different
spectral envelopes.

All generator constants live in a versioned JSON config (see
synth_config.json next to this module) so corpora are reproducible and can
be regenerated elsewhere. Every clip is a pure function of its arguments,
including the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .audio import AudioClip
from .errors import ConfigError

MACHINES = ("car", "train")
FAULT_TYPES = ("a", "b", "c", "d")
DAMAGE_LEVELS = ("low", "middle", "high")

# Disjoint stream tags keep the machine and noise random streams apart even
# when the caller reuses an integer seed across both generators.
_MACHINE_STREAM = 0x4D41
_NOISE_STREAM = 0x4E4F


class NoiseEnvironment(str, Enum):
    """One of the four fixed noise recording environments."""

    N1 = "N1"
    N2 = "N2"
    N3 = "N3"
    N4 = "N4"

    @property
    def index(self) -> int:
        return list(NoiseEnvironment).index(self)


ENVIRONMENTS = tuple(NoiseEnvironment)


@dataclass(frozen=True)
class MachineCondition:
    """Machine health state: normal, or a (fault type, damage level) pair."""

    kind: str  # "normal" | "fault"
    fault_type: str | None = None
    damage_level: str | None = None

    def __post_init__(self):
        if self.kind == "normal":
            if self.fault_type is not None or self.damage_level is not None:
                raise ValueError("normal condition carries no fault fields")
        elif self.kind == "fault":
            if self.fault_type not in FAULT_TYPES:
                raise ValueError(f"unknown fault type: {self.fault_type!r}")
            if self.damage_level not in DAMAGE_LEVELS:
                raise ValueError(f"unknown damage level: {self.damage_level!r}")
        else:
            raise ValueError(f"unknown condition kind: {self.kind!r}")

    @classmethod
    def normal(cls) -> "MachineCondition":
        return cls("normal")

    @classmethod
    def fault(cls, fault_type: str, damage_level: str) -> "MachineCondition":
        return cls("fault", fault_type, damage_level)

    @property
    def name(self) -> str:
        if self.kind == "normal":
            return "normal"
        return f"fault_{self.fault_type}_{self.damage_level}"

    @property
    def index(self) -> int:
        """Stable class index 0..12: normal first, then faults a..d x low..high."""
        if self.kind == "normal":
            return 0
        return (
            1
            + FAULT_TYPES.index(self.fault_type) * len(DAMAGE_LEVELS)
            + DAMAGE_LEVELS.index(self.damage_level)
        )


def all_conditions() -> tuple[MachineCondition, ...]:
    """The 13 distinct conditions, ordered by class index."""
    conditions = [MachineCondition.normal()]
    for fault_type in FAULT_TYPES:
        for level in DAMAGE_LEVELS:
            conditions.append(MachineCondition.fault(fault_type, level))
    return tuple(conditions)


ALL_CONDITIONS = all_conditions()
N_CONDITIONS = len(ALL_CONDITIONS)

condition_by_name = {c.name: c for c in ALL_CONDITIONS}


def load_synth_config(path=None) -> dict:
    """Load generator constants, defaulting to the packaged config."""
    if path is None:
        return _default_config()
    return _validate_config(json.loads(Path(path).read_text()))


@lru_cache(maxsize=1)
def _default_config() -> dict:
    text = resources.files(__package__).joinpath("synth_config.json").read_text()
    return _validate_config(json.loads(text))


def _validate_config(cfg: dict) -> dict:
    for key in (
        "version",
        "machines",
        "fault_types",
        "damage_depths",
        "noise_envs",
        "machine_rms_range",
        "noise_rms_range",
        "background_level",
        "fundamental_jitter",
        "partial_gain",
        "flutter_depth",
    ):
        if key not in cfg:
            raise ConfigError(f"synth config missing key {key!r}")
    missing_envs = {e.value for e in ENVIRONMENTS} - set(cfg["noise_envs"])
    if missing_envs:
        raise ConfigError(f"synth config missing noise envs: {sorted(missing_envs)}")
    for machine in MACHINES:
        if machine not in cfg["machines"]:
            raise ConfigError(f"synth config missing machine {machine!r}")
    return cfg


def _rng(stream: int, *keys: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([stream, *keys])))


def _check_duration(duration_s: float, sample_rate: int) -> int:
    n = int(round(duration_s * sample_rate))
    if duration_s <= 0 or n <= 0:
        raise ValueError(f"duration must be positive, got {duration_s}")
    if sample_rate <= 0:
        raise ValueError(f"sample rate must be positive, got {sample_rate}")
    return n


def gen_machine_sound(
    machine: str,
    condition: MachineCondition,
    duration_s: float,
    sample_rate: int,
    seed: int,
    config: dict | None = None,
) -> AudioClip:
    """Render one machine-sound clip for the given condition.

    The output is deterministic in all arguments. Within a condition, clips
    vary through seeded phase draws, a small fundamental jitter, a low
    background noise floor, and a per-clip overall level.
    """
    if machine not in MACHINES:
        raise ValueError(f"unknown machine: {machine!r}")
    cfg = config if config is not None else _default_config()
    n = _check_duration(duration_s, sample_rate)
    mcfg = cfg["machines"][machine]
    rng = _rng(_MACHINE_STREAM, MACHINES.index(machine), condition.index, int(seed))

    target_rms = rng.uniform(*cfg["machine_rms_range"])
    jitter = cfg["fundamental_jitter"] * rng.uniform(-1.0, 1.0)
    f0 = mcfg["fundamental_hz"] * (1.0 + jitter)

    t = np.arange(n, dtype=np.float64) / sample_rate
    x = np.zeros(n)
    nyquist_cap = 0.45 * sample_rate
    for h in range(1, int(mcfg["n_harmonics"]) + 1):
        freq = h * f0
        phase = rng.uniform(0.0, 2.0 * np.pi)
        if freq >= nyquist_cap:
            continue
        x += h ** -float(mcfg["harmonic_rolloff"]) * np.sin(2.0 * np.pi * freq * t + phase)

    if condition.kind == "fault":
        depth = cfg["damage_depths"][condition.damage_level]
        fcfg = cfg["fault_types"][condition.fault_type]
        for ratio in fcfg["partial_ratios"]:
            freq = ratio * f0
            phase = rng.uniform(0.0, 2.0 * np.pi)
            if freq >= nyquist_cap:
                continue
            x += depth * cfg["partial_gain"] * np.sin(2.0 * np.pi * freq * t + phase)
        flutter_phase = rng.uniform(0.0, 2.0 * np.pi)
        flutter = 1.0 + depth * cfg["flutter_depth"] * np.sin(
            2.0 * np.pi * fcfg["flutter_hz"] * t + flutter_phase
        )
        x *= flutter

    x /= np.sqrt(np.mean(np.square(x)))
    x += cfg["background_level"] * rng.standard_normal(n)
    x *= target_rms / np.sqrt(np.mean(np.square(x)))
    return AudioClip(x, sample_rate)


def gen_noise(
    env: NoiseEnvironment | str,
    duration_s: float,
    sample_rate: int,
    seed: int,
    config: dict | None = None,
) -> AudioClip:
    """Render one noise-only clip for the given environment.

    White Gaussian noise is shaped in the frequency domain by the
    environment's fixed envelope (piecewise-linear gain over Hz), then
    scaled to a seeded per-clip rms level.
    """
    env = NoiseEnvironment(env)
    cfg = config if config is not None else _default_config()
    n = _check_duration(duration_s, sample_rate)
    rng = _rng(_NOISE_STREAM, env.index, int(seed))

    target_rms = rng.uniform(*cfg["noise_rms_range"])
    white = rng.standard_normal(n)
    points = np.asarray(cfg["noise_envs"][env.value]["points"], dtype=np.float64)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    envelope = np.interp(freqs, points[:, 0], points[:, 1])
    shaped = np.fft.irfft(np.fft.rfft(white) * envelope, n)
    shaped *= target_rms / np.sqrt(np.mean(np.square(shaped)))
    return AudioClip(shaped, sample_rate)
