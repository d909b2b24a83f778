"""Mono audio clips, 16-bit PCM WAV I/O, and the signal measures used by mixing."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import NonMonoError, UnsupportedEncodingError

# int16 full scale: read divides by this, write multiplies and clips to int16.
_FULL_SCALE = 32768


@dataclass(frozen=True)
class AudioClip:
    """Immutable mono signal: float64 samples plus a sample rate in Hz.

    Samples are kept at double precision; clamping to [-1, 1] happens only
    on WAV write-out, so intermediate clips (e.g. unscaled mixtures) may
    exceed full scale.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected 1-D mono samples, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("samples must all be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_seconds(self) -> float:
        return self.samples.size / self.sample_rate

    def scaled(self, gain: float) -> "AudioClip":
        return AudioClip(self.samples * float(gain), self.sample_rate)


def read_wav(path) -> AudioClip:
    """Read a 16-bit PCM mono WAV file, scaling samples to [-1, 1).

    Raises FileNotFoundError for a missing file, NonMonoError for
    multi-channel files, and UnsupportedEncodingError for anything that is
    not plain 16-bit PCM.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such WAV file: {path}")
    try:
        with wave.open(str(path), "rb") as wav:
            n_channels = wav.getnchannels()
            sampwidth = wav.getsampwidth()
            comptype = wav.getcomptype()
            sample_rate = wav.getframerate()
            n_frames = wav.getnframes()
            raw = wav.readframes(n_frames)
    except wave.Error as exc:
        raise UnsupportedEncodingError(f"{path}: {exc}") from exc
    if n_channels != 1:
        raise NonMonoError(f"{path}: expected mono, got {n_channels} channels")
    if sampwidth != 2 or comptype != "NONE":
        raise UnsupportedEncodingError(
            f"{path}: expected 16-bit PCM, got width={sampwidth} comptype={comptype}"
        )
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _FULL_SCALE
    return AudioClip(data, sample_rate)


def write_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM mono WAV, clamping samples to [-1, 1] first."""
    clamped = np.clip(clip.samples, -1.0, 1.0)
    quantized = np.clip(np.round(clamped * _FULL_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wav:
        wav.setnchannels(1)
        wav.setsampwidth(2)
        wav.setframerate(clip.sample_rate)
        wav.writeframes(quantized.tobytes())


def rms(clip: AudioClip) -> float:
    """Root-mean-square amplitude of the clip."""
    if len(clip) == 0:
        raise ValueError("rms of an empty clip is undefined")
    return float(np.sqrt(np.mean(np.square(clip.samples))))


def time_shift(clip: AudioClip, shift_seconds: float) -> AudioClip:
    """Circularly shift the clip right by shift_seconds.

    The shift must be within [0, duration]. Circular wrap keeps the length
    and energy unchanged, so the shifted clip has identical rms.
    """
    if not 0.0 <= shift_seconds <= clip.duration_seconds:
        raise ValueError(
            f"shift {shift_seconds}s outside [0, {clip.duration_seconds}s]"
        )
    n = len(clip)
    if n == 0:
        return clip
    shift = int(round(shift_seconds * clip.sample_rate)) % n
    if shift == 0:
        return clip
    return AudioClip(np.roll(clip.samples, shift), clip.sample_rate)
