"""Exception hierarchy. Each subtree maps to one CLI exit category."""


class NoiseFaultError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(NoiseFaultError):
    """Invalid configuration, experiment spec, or argument combination."""

    exit_code = 2


class DataError(NoiseFaultError):
    """Problems with datasets, manifests, or audio files."""

    exit_code = 3


class AudioFormatError(DataError):
    """WAV file cannot be used as-is."""


class NonMonoError(AudioFormatError):
    """WAV file has more than one channel."""


class UnsupportedEncodingError(AudioFormatError):
    """WAV file is not 16-bit PCM."""


class NumericError(NoiseFaultError):
    """Numerical failure during training or evaluation."""

    exit_code = 4


class NonFiniteLossError(NumericError):
    """Training loss became NaN or infinite."""
