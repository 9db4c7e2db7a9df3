"""Evaluation: test accuracy and label-error-detection quality.

Detection convention: the sample selector marks an example as clean
(selected) or not; an example is *flagged as corrupted* exactly when it is
not selected. Precision and recall are then scored for the corrupted class:

    precision = |flagged and actually corrupted| / |flagged|
    recall    = |flagged and actually corrupted| / |actually corrupted|

with the edge conventions precision = 1 when nothing is flagged and
recall = 1 when nothing is corrupted. F is the harmonic mean, 0 when
precision + recall == 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .nn import Architecture


def accuracy(
    arch: Architecture, params: np.ndarray, features: np.ndarray, labels: np.ndarray
) -> float:
    """Fraction of argmax predictions matching the labels."""
    if len(features) == 0:
        raise ConfigError("cannot evaluate accuracy on an empty set")
    predictions = arch.forward(params, features).argmax(axis=1)
    return float(np.mean(predictions == np.asarray(labels)))


@dataclass(frozen=True)
class DetectionScores:
    precision: float
    recall: float
    f_score: float
    num_flagged: int
    num_corrupted: int


def f_score(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def detection_scores(flagged: np.ndarray, corrupted: np.ndarray) -> DetectionScores:
    """Score corrupted-label detection for one client at one evaluation point."""
    flagged = np.asarray(flagged, dtype=bool)
    corrupted = np.asarray(corrupted, dtype=bool)
    if flagged.shape != corrupted.shape or flagged.size == 0:
        raise ConfigError("flagged/corrupted must be equal-length non-empty arrays")
    true_pos = int(np.count_nonzero(flagged & corrupted))
    num_flagged = int(np.count_nonzero(flagged))
    num_corrupted = int(np.count_nonzero(corrupted))
    precision = true_pos / num_flagged if num_flagged else 1.0
    recall = true_pos / num_corrupted if num_corrupted else 1.0
    return DetectionScores(
        precision=precision,
        recall=recall,
        f_score=f_score(precision, recall),
        num_flagged=num_flagged,
        num_corrupted=num_corrupted,
    )


def scores_from_clean_mask(clean_mask: np.ndarray, corrupted: np.ndarray) -> DetectionScores:
    """Selector output (True = kept as clean) to detection scores."""
    return detection_scores(~np.asarray(clean_mask, dtype=bool), corrupted)


@dataclass(frozen=True)
class FscoreSummary:
    count: int
    mean: float
    std: float
    min: float
    q1: float
    median: float
    q3: float
    max: float


def fscore_summary(values) -> FscoreSummary:
    """Distribution summary of per-client F-scores (population std)."""
    values = np.asarray(list(values), dtype=np.float64)
    if values.size == 0:
        raise ConfigError("need at least one client F-score to summarize")
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return FscoreSummary(
        count=int(values.size),
        mean=float(values.mean()),
        std=float(values.std()),
        min=float(values.min()),
        q1=float(q1),
        median=float(median),
        q3=float(q3),
        max=float(values.max()),
    )
