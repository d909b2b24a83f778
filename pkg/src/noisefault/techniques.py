"""The five noise-handling techniques: losses, noise scores, and decisions.

A classifier over K machine conditions can be made robust to noise-only
inputs in several ways:

* softmax score (sm): plain cross-entropy training; at inference the noise
  score is one minus the maximum softmax probability.
* noise exposure (ne): adds a second loss term pushing predictions on
  noise-only clips toward the uniform distribution; same score as sm.
* energy score (fe): plain cross-entropy training; the noise score is the
  free energy -T*logsumexp(logits / T), which rises for unfamiliar inputs.
* energy-bounded (eb): adds squared hinge penalties driving the free
  energy of machine clips below one margin and of noise clips above
  another; scored like fe.
* additional class (ac): noise becomes class K+1 and the argmax decides;
  no score or threshold exists.

Score-based techniques declare an input "noise" when its score exceeds a
threshold calibrated on validation data for the best 14-class macro F1.
Scores are oriented so that higher always means more noise-like.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .errors import DataError

# Probabilities below this floor are clamped inside log() terms.
CCE_LOG_FLOOR = 1e-12


class Technique(str, Enum):
    SOFTMAX_SCORE = "sm"
    NOISE_EXPOSURE = "ne"
    ENERGY_SCORE = "fe"
    ENERGY_BOUNDED = "eb"
    ADDITIONAL_CLASS = "ac"

    @property
    def uses_exposure_data(self) -> bool:
        """Whether training consumes noise-only batches."""
        return self in (
            Technique.NOISE_EXPOSURE,
            Technique.ENERGY_BOUNDED,
            Technique.ADDITIONAL_CLASS,
        )

    @property
    def has_noise_score(self) -> bool:
        return self is not Technique.ADDITIONAL_CLASS

    def n_outputs(self, n_conditions: int) -> int:
        if self is Technique.ADDITIONAL_CLASS:
            return n_conditions + 1
        return n_conditions


TECHNIQUE_ALIASES = {
    "sm": Technique.SOFTMAX_SCORE,
    "softmax": Technique.SOFTMAX_SCORE,
    "ne": Technique.NOISE_EXPOSURE,
    "noise_exposure": Technique.NOISE_EXPOSURE,
    "fe": Technique.ENERGY_SCORE,
    "energy": Technique.ENERGY_SCORE,
    "eb": Technique.ENERGY_BOUNDED,
    "energy_bounded": Technique.ENERGY_BOUNDED,
    "ac": Technique.ADDITIONAL_CLASS,
    "additional_class": Technique.ADDITIONAL_CLASS,
}


def parse_technique(name) -> Technique:
    if isinstance(name, Technique):
        return name
    key = str(name).strip().lower()
    if key not in TECHNIQUE_ALIASES:
        raise ValueError(f"unknown technique {name!r}; use one of {sorted(set(TECHNIQUE_ALIASES))}")
    return TECHNIQUE_ALIASES[key]


@dataclass(frozen=True)
class TechniqueConfig:
    """Technique choice plus its loss/score hyperparameters.

    threshold is the calibrated noise-score cutoff; it is None until
    validation sets it.
    """

    kind: Technique
    exposure_weight: float = 0.5
    energy_weight: float = 0.1
    machine_margin: float = -25.0
    noise_margin: float = -7.0
    temperature: float = 1.0
    threshold: float | None = None

    def with_threshold(self, threshold: float) -> "TechniqueConfig":
        return replace(self, threshold=threshold)


@dataclass(frozen=True)
class Decision:
    """Inference outcome for one input.

    is_noise tells whether the noise rule fired; condition is the winning
    condition index (0..K-1) otherwise. noise_score is None for the
    additional-class technique, which has no score.
    """

    is_noise: bool
    condition: int | None
    noise_score: float | None


def softmax(logits, temperature: float = 1.0) -> np.ndarray:
    """Stable softmax along the last axis."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    scaled = logits / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_score(probs) -> np.ndarray | float:
    """Maximum predicted probability (confidence), along the last axis."""
    probs = np.asarray(probs, dtype=np.float64)
    result = probs.max(axis=-1)
    return float(result) if result.ndim == 0 else result


def logsumexp(values, axis=-1) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    peak = values.max(axis=axis, keepdims=True)
    out = np.log(np.exp(values - peak).sum(axis=axis)) + np.squeeze(peak, axis=axis)
    return out


def energy_score(logits, temperature: float = 1.0) -> np.ndarray | float:
    """Negative free energy T * logsumexp(logits / T), along the last axis.

    Higher values mean more confident, more machine-like inputs.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    result = temperature * logsumexp(logits / temperature, axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def free_energy(logits, temperature: float = 1.0) -> np.ndarray | float:
    """-T * logsumexp(logits / T); higher for unfamiliar (noise-like) inputs."""
    result = -np.asarray(energy_score(logits, temperature))
    return float(result) if result.ndim == 0 else result


def cce_loss(probs, target) -> np.ndarray | float:
    """Categorical cross entropy -sum(target * log(probs)) along the last axis.

    log() is clamped at CCE_LOG_FLOOR, so zero predicted probabilities are
    safe. Accepts single vectors or row-wise batches.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    losses = -(target * np.log(np.maximum(probs, CCE_LOG_FLOOR))).sum(axis=-1)
    return float(losses) if losses.ndim == 0 else losses


def _mean_cce_from_logits(logits, targets, temperature: float = 1.0) -> float:
    return float(np.mean(cce_loss(softmax(logits, temperature), targets)))


def ne_loss(machine_logits, machine_targets, noise_logits, exposure_weight: float) -> float:
    """Cross entropy on machine clips plus weighted uniform-target cross
    entropy on noise clips (the noise exposure term)."""
    machine_logits = np.atleast_2d(np.asarray(machine_logits, dtype=np.float64))
    if machine_logits.shape[0] == 0:
        raise DataError("noise exposure loss needs a nonempty machine batch")
    loss = _mean_cce_from_logits(machine_logits, machine_targets)
    noise_logits = np.atleast_2d(np.asarray(noise_logits, dtype=np.float64))
    if noise_logits.shape[0]:
        k = machine_logits.shape[1]
        uniform = np.full(k, 1.0 / k)
        loss += exposure_weight * float(np.mean(cce_loss(softmax(noise_logits), uniform)))
    return loss


def energy_reg_loss(
    machine_logits,
    noise_logits,
    machine_margin: float,
    noise_margin: float,
    temperature: float = 1.0,
) -> float:
    """Squared hinge penalties on free energy: machine clips above
    machine_margin and noise clips below noise_margin are penalized."""
    total = 0.0
    machine_logits = np.atleast_2d(np.asarray(machine_logits, dtype=np.float64))
    if machine_logits.shape[0]:
        e_machine = free_energy(machine_logits, temperature)
        total += float(np.mean(np.square(np.maximum(0.0, e_machine - machine_margin))))
    noise_logits = np.atleast_2d(np.asarray(noise_logits, dtype=np.float64))
    if noise_logits.shape[0]:
        e_noise = free_energy(noise_logits, temperature)
        total += float(np.mean(np.square(np.maximum(0.0, noise_margin - e_noise))))
    return total


def eb_total_loss(
    machine_logits,
    machine_targets,
    noise_logits,
    energy_weight: float,
    machine_margin: float,
    noise_margin: float,
    temperature: float = 1.0,
) -> float:
    """Cross entropy plus weighted energy regularization."""
    machine_logits = np.atleast_2d(np.asarray(machine_logits, dtype=np.float64))
    if machine_logits.shape[0] == 0:
        raise DataError("energy-bounded loss needs a nonempty machine batch")
    return _mean_cce_from_logits(machine_logits, machine_targets) + energy_weight * (
        energy_reg_loss(machine_logits, noise_logits, machine_margin, noise_margin, temperature)
    )


def ac_loss(machine_logits, machine_targets, noise_logits) -> float:
    """Cross entropy over the concatenated batch, with noise clips targeted
    at the extra final class."""
    machine_logits = np.atleast_2d(np.asarray(machine_logits, dtype=np.float64))
    noise_logits = np.atleast_2d(np.asarray(noise_logits, dtype=np.float64))
    n_out = machine_logits.shape[1] if machine_logits.shape[0] else noise_logits.shape[1]
    machine_targets = np.atleast_2d(np.asarray(machine_targets, dtype=np.float64))
    if machine_logits.shape[0] and machine_targets.shape[1] != n_out:
        raise ValueError(
            f"additional-class targets must have {n_out} columns "
            f"(noise is the final class), got {machine_targets.shape[1]}"
        )
    losses = []
    if machine_logits.shape[0]:
        losses.append(cce_loss(softmax(machine_logits), machine_targets))
    if noise_logits.shape[0]:
        noise_target = np.zeros(n_out)
        noise_target[-1] = 1.0
        losses.append(cce_loss(softmax(noise_logits), noise_target))
    if not losses:
        raise DataError("additional-class loss needs at least one item")
    return float(np.mean(np.concatenate([np.atleast_1d(l) for l in losses])))


def noise_score(kind: Technique, logits, temperature: float = 1.0) -> np.ndarray | float:
    """Noise score oriented so larger means more noise-like.

    sm/ne: 1 - max softmax probability. fe/eb: the free energy. The
    additional-class technique has no score and raises.
    """
    kind = Technique(kind)
    if not kind.has_noise_score:
        raise ValueError("additional-class technique decides by argmax, not by score")
    if kind in (Technique.SOFTMAX_SCORE, Technique.NOISE_EXPOSURE):
        result = 1.0 - np.asarray(softmax_score(softmax(logits, temperature)))
        return float(result) if result.ndim == 0 else result
    return free_energy(logits, temperature)


def technique_loss(
    cfg: TechniqueConfig, machine_logits, machine_targets, noise_logits=None
) -> float:
    """Dispatch to the technique's training loss."""
    if noise_logits is None:
        noise_logits = np.zeros((0, np.atleast_2d(machine_logits).shape[1]))
    if cfg.kind in (Technique.SOFTMAX_SCORE, Technique.ENERGY_SCORE):
        return _mean_cce_from_logits(machine_logits, machine_targets)
    if cfg.kind is Technique.NOISE_EXPOSURE:
        return ne_loss(machine_logits, machine_targets, noise_logits, cfg.exposure_weight)
    if cfg.kind is Technique.ENERGY_BOUNDED:
        return eb_total_loss(
            machine_logits,
            machine_targets,
            noise_logits,
            cfg.energy_weight,
            cfg.machine_margin,
            cfg.noise_margin,
            cfg.temperature,
        )
    return ac_loss(machine_logits, machine_targets, noise_logits)


def _cce_grad(logits, targets, temperature: float = 1.0) -> np.ndarray:
    """Gradient of sum of per-row clamped CCE w.r.t. logits (no batch mean)."""
    probs = softmax(logits, temperature)
    targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    if targets.shape[0] == 1 and probs.shape[0] > 1:
        targets = np.broadcast_to(targets, probs.shape)
    active = probs > CCE_LOG_FLOOR
    weight = (targets * active).sum(axis=-1, keepdims=True)
    return (probs * weight - targets * active) / temperature


def technique_loss_and_grads(
    cfg: TechniqueConfig, machine_logits, machine_targets, noise_logits=None
):
    """Training loss and its gradients w.r.t. machine and noise logits.

    Returns (loss, d_machine, d_noise); d_noise is None when the technique
    ignores noise batches or none was given.
    """
    machine_logits = np.atleast_2d(np.asarray(machine_logits, dtype=np.float64))
    have_noise = noise_logits is not None and np.atleast_2d(noise_logits).shape[0] > 0
    if have_noise:
        noise_logits = np.atleast_2d(np.asarray(noise_logits, dtype=np.float64))
    b_m = machine_logits.shape[0]
    loss = technique_loss(cfg, machine_logits, machine_targets, noise_logits if have_noise else None)

    if cfg.kind in (Technique.SOFTMAX_SCORE, Technique.ENERGY_SCORE):
        return loss, _cce_grad(machine_logits, machine_targets) / b_m, None

    if cfg.kind is Technique.NOISE_EXPOSURE:
        d_machine = _cce_grad(machine_logits, machine_targets) / b_m
        d_noise = None
        if have_noise:
            k = machine_logits.shape[1]
            uniform = np.full(k, 1.0 / k)
            d_noise = cfg.exposure_weight * _cce_grad(noise_logits, uniform) / noise_logits.shape[0]
        return loss, d_machine, d_noise

    if cfg.kind is Technique.ENERGY_BOUNDED:
        t = cfg.temperature
        d_machine = _cce_grad(machine_logits, machine_targets) / b_m
        # d free_energy / d logits = -softmax(logits / T)
        e_machine = np.atleast_1d(free_energy(machine_logits, t))
        hinge_m = np.maximum(0.0, e_machine - cfg.machine_margin)
        d_machine += (
            cfg.energy_weight
            * (2.0 * hinge_m / b_m)[:, None]
            * -softmax(machine_logits, t)
        )
        d_noise = None
        if have_noise:
            e_noise = np.atleast_1d(free_energy(noise_logits, t))
            hinge_n = np.maximum(0.0, cfg.noise_margin - e_noise)
            d_noise = (
                cfg.energy_weight
                * (2.0 * hinge_n / noise_logits.shape[0])[:, None]
                * softmax(noise_logits, t)
            )
        return loss, d_machine, d_noise

    # Additional class: pooled mean over the concatenated batch.
    b_n = noise_logits.shape[0] if have_noise else 0
    total = b_m + b_n
    d_machine = _cce_grad(machine_logits, machine_targets) / total
    d_noise = None
    if have_noise:
        n_out = noise_logits.shape[1]
        noise_target = np.zeros(n_out)
        noise_target[-1] = 1.0
        d_noise = _cce_grad(noise_logits, noise_target) / total
    return loss, d_machine, d_noise


def calibrate_threshold(scores, is_noise, true_conditions, pred_conditions, n_conditions: int = 13):
    """Pick the noise-score threshold maximizing 14-class macro F1.

    Items with score strictly above the threshold are labeled noise, the
    rest take their predicted condition. Candidates are the midpoints
    between consecutive distinct scores plus -inf and +inf sentinels; ties
    resolve to the smallest candidate. Returns (threshold, macro_f1).
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_noise = np.asarray(is_noise, dtype=bool)
    true_conditions = np.asarray(true_conditions, dtype=np.intp)
    pred_conditions = np.asarray(pred_conditions, dtype=np.intp)
    if scores.size == 0:
        raise DataError("cannot calibrate on an empty validation set")
    if not (is_noise.any() and (~is_noise).any()):
        raise DataError("calibration needs both noise and machine items")
    n_labels = n_conditions + 1
    noise_label = n_conditions
    true_labels = np.where(is_noise, noise_label, true_conditions)

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    distinct = np.flatnonzero(np.diff(sorted_scores) > 0)
    midpoints = 0.5 * (sorted_scores[distinct] + sorted_scores[distinct + 1])
    candidates = np.concatenate(([-np.inf], midpoints, [np.inf]))

    # Start at -inf (everything noise); walking the candidates upward flips
    # items whose score drops to or below the threshold back to their
    # predicted condition. Row sums of the confusion are fixed; only the
    # diagonal and column sums move.
    true_counts = np.bincount(true_labels, minlength=n_labels).astype(np.float64)
    pred_counts = np.zeros(n_labels)
    pred_counts[noise_label] = scores.size
    diag = np.zeros(n_labels)
    diag[noise_label] = float(is_noise.sum())

    def current_macro_f1() -> float:
        denom = true_counts + pred_counts
        f1 = np.where(denom > 0, 2.0 * diag / np.maximum(denom, 1e-300), 0.0)
        return float(f1.mean())

    best_threshold = -np.inf
    best_f1 = current_macro_f1()
    cursor = 0
    for candidate in candidates[1:]:
        while cursor < scores.size and sorted_scores[cursor] <= candidate:
            item = order[cursor]
            pred_counts[noise_label] -= 1
            diag[noise_label] -= float(is_noise[item])
            pred = pred_conditions[item]
            pred_counts[pred] += 1
            diag[pred] += float(true_labels[item] == pred)
            cursor += 1
        f1 = current_macro_f1()
        if f1 > best_f1:
            best_f1 = f1
            best_threshold = float(candidate)
    return best_threshold, best_f1


def decide(kind: Technique, logits, threshold: float | None, temperature: float = 1.0) -> Decision:
    """Apply the technique's inference rule to one logit vector."""
    kind = Technique(kind)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 1:
        raise ValueError(f"decide expects a single logit vector, got shape {logits.shape}")
    if kind is Technique.ADDITIONAL_CLASS:
        winner = int(np.argmax(logits))
        is_noise = winner == logits.size - 1
        return Decision(is_noise, None if is_noise else winner, None)
    if threshold is None:
        raise ValueError(f"technique {kind.value} needs a calibrated threshold")
    score = float(noise_score(kind, logits, temperature))
    if score > threshold:
        return Decision(True, None, score)
    return Decision(False, int(np.argmax(logits)), score)


def decide_batch(kind: Technique, logits, threshold: float | None, temperature: float = 1.0):
    """Vectorized decisions: (labels, scores) where the noise label is K.

    For score techniques K is the logit width; for additional-class the
    final column is already the noise class and scores is None.
    """
    kind = Technique(kind)
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    if kind is Technique.ADDITIONAL_CLASS:
        return logits.argmax(axis=1), None
    if threshold is None:
        raise ValueError(f"technique {kind.value} needs a calibrated threshold")
    scores = np.atleast_1d(noise_score(kind, logits, temperature))
    labels = logits.argmax(axis=1)
    labels[scores > threshold] = logits.shape[1]
    return labels, scores
