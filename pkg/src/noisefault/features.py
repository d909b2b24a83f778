"""Log-Mel spectrogram front end and per-channel batch normalization.

Framing is non-centered (no padding): a clip of n samples yields
floor((n - n_fft) / hop) + 1 frames. At the full scale of 16 kHz, 12 s
clips, the default 1024/512 configuration maps 192000 samples to 374
frames and, with 128 mel bands, produces (128, 374) features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .audio import AudioClip
from .errors import ConfigError


@dataclass(frozen=True)
class FeatureConfig:
    """STFT and mel filterbank parameters."""

    n_fft: int = 512
    hop: int = 256
    n_mels: int = 32
    fmin: float = 50.0
    fmax: float = 4000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_fft <= 0 or self.hop <= 0:
            raise ConfigError("n_fft and hop must be positive")
        if self.hop > self.n_fft:
            raise ConfigError(f"hop {self.hop} must not exceed n_fft {self.n_fft}")
        if not 0.0 <= self.fmin < self.fmax:
            raise ConfigError(f"need 0 <= fmin < fmax, got {self.fmin}, {self.fmax}")
        if self.n_mels <= 0:
            raise ConfigError("n_mels must be positive")
        if self.log_floor <= 0.0:
            raise ConfigError("log_floor must be positive")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.n_fft:
            raise ValueError(
                f"clip of {n_samples} samples is shorter than one {self.n_fft}-sample frame"
            )
        return (n_samples - self.n_fft) // self.hop + 1


# 16 kHz / 12 s configuration reproducing the (128, 374) feature shape.
FULL_SCALE_CONFIG = FeatureConfig(n_fft=1024, hop=512, n_mels=128, fmin=50.0, fmax=8000.0)

# Fast configuration for 8 kHz desk-scale experiments.
DESK_SCALE_CONFIG = FeatureConfig()


@dataclass(frozen=True)
class LogMelFeature:
    """2-D log-mel array [n_mels x n_frames] plus the config that produced it."""

    values: np.ndarray
    config: FeatureConfig


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(clip: AudioClip, cfg: FeatureConfig) -> np.ndarray:
    """Power spectrogram [n_fft // 2 + 1 x n_frames], Hann window, no centering."""
    n_frames = cfg.n_frames(len(clip))
    frames = np.lib.stride_tricks.sliding_window_view(clip.samples, cfg.n_fft)
    frames = frames[:: cfg.hop][:n_frames]
    spectrum = np.fft.rfft(frames * hann_window(cfg.n_fft), axis=1)
    return np.square(np.abs(spectrum)).T


def hz_to_mel(freq_hz):
    return 2595.0 * np.log10(1.0 + np.asarray(freq_hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (np.power(10.0, np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filter_centers(cfg: FeatureConfig) -> np.ndarray:
    """Filter edge/center frequencies in Hz: n_mels + 2 points, mel-spaced."""
    mels = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    return mel_to_hz(mels)


def mel_filterbank(cfg: FeatureConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank matrix [n_mels x n_fft // 2 + 1].

    Raises ConfigError if any filter would be empty (no FFT bin receives
    positive weight), which happens when n_mels is too large for the FFT
    resolution.
    """
    if cfg.fmax > sample_rate / 2:
        raise ConfigError(
            f"fmax {cfg.fmax} above Nyquist {sample_rate / 2} for rate {sample_rate}"
        )
    edges = mel_filter_centers(cfg)
    fft_freqs = np.arange(cfg.n_fft // 2 + 1) * (sample_rate / cfg.n_fft)
    ramps = edges[:, None] - fft_freqs[None, :]
    bank = np.zeros((cfg.n_mels, fft_freqs.size))
    for m in range(cfg.n_mels):
        lower = -ramps[m] / (edges[m + 1] - edges[m])
        upper = ramps[m + 2] / (edges[m + 2] - edges[m + 1])
        bank[m] = np.maximum(0.0, np.minimum(lower, upper))
    empty = np.flatnonzero(bank.sum(axis=1) == 0.0)
    if empty.size:
        raise ConfigError(
            f"{empty.size} empty mel filters (first at index {empty[0]}): "
            "reduce n_mels or increase n_fft"
        )
    return bank


def log_mel(clip: AudioClip, cfg: FeatureConfig) -> LogMelFeature:
    """log(filterbank @ power + log_floor); finite everywhere by construction."""
    power = stft_power(clip, cfg)
    bank = mel_filterbank(cfg, clip.sample_rate)
    return LogMelFeature(np.log(bank @ power + cfg.log_floor), cfg)


def save_feature(path, feature: np.ndarray) -> None:
    """Cache a feature array to disk (.npy: header with dims/dtype + raw data)."""
    np.save(path, np.asarray(feature, dtype=np.float64), allow_pickle=False)


def load_feature(path) -> np.ndarray:
    return np.load(path, allow_pickle=False)


class BatchNorm:
    """Batch normalization over axis 1, for any input rank >= 2.

    Applied to a stacked feature batch [B, n_mels, n_frames] this normalizes
    each mel band; applied to a conv activation [B, C, H, W] it normalizes
    each channel. Training mode uses batch statistics and updates running
    statistics with an exponential moving average
    (running = (1 - momentum) * running + momentum * batch); eval mode uses
    the running statistics. Scale and shift are learnable per channel.
    """

    def __init__(self, num_channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.num_channels = num_channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(num_channels)
        self.beta = np.zeros(num_channels)
        self.running_mean = np.zeros(num_channels)
        self.running_var = np.ones(num_channels)
        self.dgamma = np.zeros(num_channels)
        self.dbeta = np.zeros(num_channels)
        self._cache = None

    def params(self) -> dict:
        return {"gamma": self.gamma, "beta": self.beta}

    def grads(self) -> dict:
        return {"gamma": self.dgamma, "beta": self.dbeta}

    def state(self) -> dict:
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def _shape_for(self, x: np.ndarray) -> tuple:
        if x.ndim < 2 or x.shape[1] != self.num_channels:
            raise ValueError(
                f"expected axis 1 of size {self.num_channels}, got shape {x.shape}"
            )
        return (1, self.num_channels) + (1,) * (x.ndim - 2)

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        shape = self._shape_for(x)
        axes = tuple(i for i in range(x.ndim) if i != 1)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            self.running_mean = (1.0 - self.momentum) * self.running_mean + self.momentum * mean
            self.running_var = (1.0 - self.momentum) * self.running_var + self.momentum * var
        else:
            mean = self.running_mean
            var = self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        x_hat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        if train:
            n = x.size // self.num_channels
            self._cache = ("train", x_hat, inv_std, axes, shape, n)
        else:
            self._cache = ("eval", x_hat, inv_std, axes, shape, None)
        return self.gamma.reshape(shape) * x_hat + self.beta.reshape(shape)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        mode, x_hat, inv_std, axes, shape, n = self._cache
        if mode == "eval":
            # Eval mode treats the running statistics as constants.
            self.dbeta = dy.sum(axis=axes)
            self.dgamma = (dy * x_hat).sum(axis=axes)
            return dy * (self.gamma * inv_std.reshape(-1)).reshape(shape)
        self.dbeta = dy.sum(axis=axes)
        self.dgamma = (dy * x_hat).sum(axis=axes)
        dx_hat = dy * self.gamma.reshape(shape)
        sum_dx_hat = dx_hat.sum(axis=axes).reshape(shape)
        sum_dx_hat_xhat = (dx_hat * x_hat).sum(axis=axes).reshape(shape)
        return (
            inv_std.reshape(shape)
            / n
            * (n * dx_hat - sum_dx_hat - x_hat * sum_dx_hat_xhat)
        )
