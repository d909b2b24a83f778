"""Training loop and evaluation.

Each epoch walks once over the machine-sound training family in
deterministic batches, pairs every batch with freshly augmented
noise-only clips when the technique consumes them, takes one Adam step
per batch, then validates: score-based techniques calibrate the
noise-score threshold for the best 14-class macro F1, the
additional-class technique just measures its argmax F1. The parameters
and threshold from the best validation epoch are what evaluation uses.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import (
    NOISE_LABEL_INDEX,
    LABELS,
    draw_augmentation,
    augment_noise,
    machine_examples,
    noise_examples,
    sample_batch,
    steps_per_epoch,
)
from .errors import DataError, NonFiniteLossError
from .features import DESK_SCALE_CONFIG, FeatureConfig, log_mel
from .metrics import confusion_matrix, macro_f1, per_class_f1
from .net import Architecture, LrSchedule, Network, adam_step, init_adam
from .synth import N_CONDITIONS
from .techniques import (
    Technique,
    TechniqueConfig,
    calibrate_threshold,
    decide_batch,
    noise_score,
    technique_loss_and_grads,
)

_EVAL_CHUNK = 256


def features_for_clips(clips, cfg: FeatureConfig) -> np.ndarray:
    """Stack per-clip log-mel features into [B, n_mels, n_frames]."""
    return np.stack([log_mel(clip, cfg).values for clip in clips])


@dataclass(frozen=True)
class TrainRun:
    """Everything one training run needs."""

    technique: TechniqueConfig
    splits: object
    feature_config: FeatureConfig = DESK_SCALE_CONFIG
    epochs: int = 100
    batch_machine: int = 8
    batch_noise: int = 8
    seed: int = 0
    schedule: LrSchedule | None = None
    widths: tuple = (16, 32, 64)

    def resolved_schedule(self) -> LrSchedule:
        # A schedule needs >= 2 epochs; a 1-epoch run just reads epoch 1,
        # which always sits inside the base-rate hold.
        total = max(2, self.epochs)
        if self.schedule is not None:
            if self.schedule.total_epochs != total:
                return self.schedule.scaled_to(total)
            return self.schedule
        return LrSchedule().scaled_to(total)


@dataclass(frozen=True)
class HistoryEntry:
    epoch: int
    train_loss: float
    val_macro_f1: float
    threshold: float | None


@dataclass(frozen=True)
class TrainResult:
    network: Network
    technique: TechniqueConfig
    threshold: float | None
    history: tuple
    best_epoch: int
    best_val_f1: float


def _one_hot(indices, width: int) -> np.ndarray:
    out = np.zeros((len(indices), width))
    out[np.arange(len(indices)), indices] = 1.0
    return out


def _snapshot(network: Network):
    return (
        {k: v.copy() for k, v in network.params().items()},
        {k: v.copy() for k, v in network.state().items()},
    )


def _forward_chunked(network: Network, feats: np.ndarray) -> np.ndarray:
    """Eval-mode forward in bounded-memory chunks."""
    outputs = [
        network.forward(feats[i : i + _EVAL_CHUNK], train=False)
        for i in range(0, len(feats), _EVAL_CHUNK)
    ]
    return np.concatenate(outputs)


def _validate(network, cfg: TechniqueConfig, feats, labels):
    """Validation macro F1 and, for score techniques, the calibrated
    threshold. Returns (threshold-or-None, macro_f1)."""
    logits = _forward_chunked(network, feats)
    is_noise = labels == NOISE_LABEL_INDEX
    if cfg.kind is Technique.ADDITIONAL_CLASS:
        preds = logits.argmax(axis=1)
        score = macro_f1(confusion_matrix(labels, preds, N_CONDITIONS + 1))
        return None, score
    scores = np.atleast_1d(noise_score(cfg.kind, logits, cfg.temperature))
    preds = logits.argmax(axis=1)
    true_conditions = np.where(is_noise, 0, labels)
    return calibrate_threshold(scores, is_noise, true_conditions, preds, N_CONDITIONS)


def train(run: TrainRun) -> TrainResult:
    """Run the full loop and return the best-validation-epoch model."""
    cfg = run.technique
    fc = run.feature_config
    train_split = run.splits.train
    machines = machine_examples(train_split)
    noises = noise_examples(train_split)
    if not machines:
        raise DataError("training split has no machine examples")
    if cfg.kind.uses_exposure_data and not noises:
        raise DataError(f"technique {cfg.kind.value} needs noise-only training clips")
    validation = run.splits.validation
    if not validation:
        raise DataError("validation split is empty")

    n_outputs = cfg.kind.n_outputs(N_CONDITIONS)
    arch = Architecture(n_mels=fc.n_mels, n_classes=n_outputs, widths=run.widths)
    network = Network(arch)
    network.init_params(run.seed)
    params = network.params()
    adam = init_adam(params)
    schedule = run.resolved_schedule()

    # Machine mixtures and validation clips are frozen, so their features
    # are computed once; noise-only training clips are re-augmented every
    # epoch and featurized on demand.
    machine_feats = features_for_clips([e.clip for e in machines], fc)
    machine_labels = np.array([e.label_index for e in machines])
    val_feats = features_for_clips([e.clip for e in validation], fc)
    val_labels = np.array([e.label_index for e in validation])
    noise_index = {e.clip_id: i for i, e in enumerate(noises)}
    machine_index = {e.clip_id: i for i, e in enumerate(machines)}

    if cfg.kind.uses_exposure_data:
        b_m, b_n = run.batch_machine, run.batch_noise
    else:
        # No exposure data: machine-only batches at the same total size.
        b_m, b_n = run.batch_machine + run.batch_noise, 0
    n_steps = steps_per_epoch(len(machines), b_m)
    if n_steps == 0:
        raise DataError(
            f"machine family of {len(machines)} cannot fill one batch of {b_m}"
        )

    history = []
    best_f1 = -1.0
    best_epoch = 0
    best_threshold = None
    best_params = None
    for epoch in range(1, run.epochs + 1):
        lr = schedule.at_epoch(epoch)
        epoch_losses = []
        for step in range(n_steps):
            m_batch, n_batch = sample_batch(train_split, b_m, b_n, run.seed, epoch, step)
            m_rows = [machine_index[e.clip_id] for e in m_batch]
            m_feats = machine_feats[m_rows]
            m_targets = _one_hot(machine_labels[m_rows], n_outputs)
            n_feats = None
            if n_batch:
                augmented = []
                for example in n_batch:
                    idx = noise_index[example.clip_id]
                    shift, gain = draw_augmentation(
                        run.seed, epoch, idx, example.clip.duration_seconds
                    )
                    augmented.append(augment_noise(example.clip, shift, gain))
                n_feats = features_for_clips(augmented, fc)

            if n_feats is None:
                logits = network.forward(m_feats, train=True)
                m_logits, n_logits = logits, None
            else:
                logits = network.forward(np.concatenate([m_feats, n_feats]), train=True)
                m_logits, n_logits = logits[: len(m_feats)], logits[len(m_feats) :]
            loss, d_machine, d_noise = technique_loss_and_grads(
                cfg, m_logits, m_targets, n_logits
            )
            if not np.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss {loss} at epoch {epoch} step {step} "
                    f"(technique {cfg.kind.value}, lr {lr})"
                )
            dlogits = d_machine
            if n_logits is not None:
                if d_noise is None:
                    d_noise = np.zeros_like(n_logits)
                dlogits = np.concatenate([d_machine, d_noise])
            network.backward(dlogits)
            adam_step(params, network.grads(), adam, lr)
            epoch_losses.append(loss)

        threshold, val_f1 = _validate(network, cfg, val_feats, val_labels)
        history.append(
            HistoryEntry(epoch, float(np.mean(epoch_losses)), val_f1, threshold)
        )
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_epoch = epoch
            best_threshold = threshold
            best_params = _snapshot(network)

    best_network = Network(arch)
    best_network.load(*best_params)
    return TrainResult(
        network=best_network,
        technique=cfg.with_threshold(best_threshold) if best_threshold is not None else cfg,
        threshold=best_threshold,
        history=tuple(history),
        best_epoch=best_epoch,
        best_val_f1=best_f1,
    )


@dataclass(frozen=True)
class EvalReport:
    """Joint noise-detection + condition-classification outcome."""

    confusion: np.ndarray
    class_f1: np.ndarray
    macro_f1: float
    noise_f1: float
    threshold: float | None
    n_examples: int
    labels: tuple = LABELS


def evaluate(network: Network, cfg: TechniqueConfig, examples,
             feature_config: FeatureConfig = DESK_SCALE_CONFIG) -> EvalReport:
    """Frozen-model evaluation over one split."""
    examples = list(examples)
    if not examples:
        raise DataError("cannot evaluate an empty split")
    feats = features_for_clips([e.clip for e in examples], feature_config)
    truth = np.array([e.label_index for e in examples])
    logits = _forward_chunked(network, feats)
    if cfg.kind is not Technique.ADDITIONAL_CLASS and cfg.threshold is None:
        raise DataError(f"technique {cfg.kind.value} has no calibrated threshold")
    preds, _ = decide_batch(cfg.kind, logits, cfg.threshold, cfg.temperature)
    confusion = confusion_matrix(truth, preds, N_CONDITIONS + 1)
    class_f1 = per_class_f1(confusion)
    return EvalReport(
        confusion=confusion,
        class_f1=class_f1,
        macro_f1=float(class_f1.mean()),
        noise_f1=float(class_f1[NOISE_LABEL_INDEX]),
        threshold=cfg.threshold,
        n_examples=len(examples),
    )


def write_history_csv(history, path) -> None:
    """epoch,loss,val_f1,eta rows; eta blank for the additional-class kind."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "loss", "val_f1", "eta"])
        for entry in history:
            writer.writerow(
                [
                    entry.epoch,
                    repr(entry.train_loss),
                    repr(entry.val_macro_f1),
                    "" if entry.threshold is None else repr(entry.threshold),
                ]
            )
