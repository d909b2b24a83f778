"""Noise-robust machine-fault classification at desk scale.

Synthesizes machine sounds and environment noises, mixes them at
controlled SNR, trains a small numpy CNN under five noise-handling
techniques, calibrates a noise-score threshold on validation data, and
evaluates joint noise-detection + fault-classification macro F1.
"""

from .audio import AudioClip, read_wav, rms, time_shift, write_wav
from .data import (
    LABELS,
    NOISE_LABEL_INDEX,
    LabeledExample,
    ManifestSource,
    SplitCounts,
    SplitSpec,
    Splits,
    SynthSource,
    augment_noise,
    build_splits,
    measured_snr_db,
    mix_at_snr,
    mix_components,
    read_manifest,
    sample_batch,
    write_manifest,
)
from .errors import (
    AudioFormatError,
    ConfigError,
    DataError,
    NoiseFaultError,
    NonFiniteLossError,
    NonMonoError,
    NumericError,
    UnsupportedEncodingError,
)
from .experiment import (
    ExperimentSpec,
    Protocol,
    ResultRow,
    ResultTable,
    emit_table,
    run_experiment,
    write_reports,
)
from .features import (
    DESK_SCALE_CONFIG,
    FULL_SCALE_CONFIG,
    BatchNorm,
    FeatureConfig,
    LogMelFeature,
    log_mel,
    mel_filterbank,
)
from .metrics import confusion_matrix, macro_f1, per_class_f1
from .net import (
    AdamState,
    Architecture,
    LrSchedule,
    Network,
    adam_step,
    grad_check,
    init_adam,
    load_checkpoint,
    save_checkpoint,
)
from .synth import (
    ALL_CONDITIONS,
    MACHINES,
    N_CONDITIONS,
    MachineCondition,
    NoiseEnvironment,
    gen_machine_sound,
    gen_noise,
)
from .techniques import (
    Decision,
    Technique,
    TechniqueConfig,
    calibrate_threshold,
    cce_loss,
    decide,
    decide_batch,
    energy_score,
    free_energy,
    noise_score,
    softmax,
    softmax_score,
    technique_loss,
    technique_loss_and_grads,
)
from .train import EvalReport, TrainResult, TrainRun, evaluate, train

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
