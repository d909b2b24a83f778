"""Confusion-matrix metrics shared by threshold calibration and evaluation."""

from __future__ import annotations

import numpy as np


def confusion_matrix(true_labels, pred_labels, n_labels: int) -> np.ndarray:
    """Counts matrix [n_labels x n_labels]; rows are truth, columns predictions."""
    true_labels = np.asarray(true_labels, dtype=np.intp)
    pred_labels = np.asarray(pred_labels, dtype=np.intp)
    if true_labels.shape != pred_labels.shape:
        raise ValueError("true and predicted label arrays must have equal length")
    if true_labels.size and (
        true_labels.min() < 0
        or true_labels.max() >= n_labels
        or pred_labels.min() < 0
        or pred_labels.max() >= n_labels
    ):
        raise ValueError(f"labels outside [0, {n_labels})")
    matrix = np.zeros((n_labels, n_labels), dtype=np.int64)
    np.add.at(matrix, (true_labels, pred_labels), 1)
    return matrix


def per_class_f1(confusion: np.ndarray) -> np.ndarray:
    """F1 per class; classes with no true and no predicted items score 0."""
    confusion = np.asarray(confusion, dtype=np.float64)
    correct = np.diag(confusion)
    true_counts = confusion.sum(axis=1)
    pred_counts = confusion.sum(axis=0)
    denom = true_counts + pred_counts
    with np.errstate(invalid="ignore"):
        f1 = np.where(denom > 0, 2.0 * correct / np.maximum(denom, 1e-300), 0.0)
    return f1


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class F1 over every class in the label set."""
    return float(per_class_f1(confusion).mean())
