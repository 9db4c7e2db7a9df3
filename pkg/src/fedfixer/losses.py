"""Logit-space losses and the low-loss sample selector.

Everything here operates on logits (outputs of `fedfixer.nn` architectures)
and is pure: no parameters, no state. The pieces are

* softmax cross-entropy, per example and against every possible label,
* the confidence regularizer, a negative prior-weighted expected CE term
  that rewards sharp predictions (weight `cr_weight`, disabled at 0),
* the combined training loss CE + CR used by all sieve-style updates, and
* `select_clean`, which keeps an example iff the CE under its (possibly
  noisy) label is strictly below the mean CE over all labels.

The selector has a useful guarantee: an example whose label receives
predicted probability above 1/L is always selected. This follows from the
AM-GM inequality -- mean CE over labels equals -log(geometric mean of the
predicted probabilities), and the geometric mean is at most 1/L. The
`selector_violations` helper counts counterexamples and is used as a test
oracle; it is not on any production path.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError

PRIOR_ATOL = 1e-9


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise log-softmax over the last axis, stable under logit shifts."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def label_prior(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Empirical label distribution: probs[i] = (#labels == i) / N.

    Computed from the labels actually observed (i.e. the noisy ones); in a
    federated run each client derives its prior from its own local labels.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ConfigError("cannot compute a label prior from zero labels")
    counts = np.bincount(labels, minlength=num_classes)
    if len(counts) > num_classes:
        raise ConfigError("labels exceed the declared number of classes")
    return counts / labels.size


def validate_prior(prior: np.ndarray, num_classes: int | None = None) -> np.ndarray:
    prior = np.asarray(prior, dtype=np.float64)
    if prior.ndim != 1 or (num_classes is not None and prior.shape[0] != num_classes):
        raise ConfigError(f"prior has wrong shape {prior.shape}")
    if np.any(prior < 0) or abs(prior.sum() - 1.0) > PRIOR_ATOL:
        raise ConfigError("prior entries must be non-negative and sum to 1")
    return prior


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-example cross-entropy of each logits row against its label."""
    logp = log_softmax(logits)
    return -np.take_along_axis(logp, np.asarray(labels)[..., None], axis=-1)[..., 0]


def ce_per_label(logits: np.ndarray) -> np.ndarray:
    """CE of each logits row against every one of the L labels, shape (..., L)."""
    return -log_softmax(logits)


def cr_loss(logits: np.ndarray, prior: np.ndarray, cr_weight: float) -> np.ndarray:
    """Confidence regularizer: -cr_weight * sum_i prior[i] * CE(logits, i).

    Always <= 0; identically 0 when cr_weight == 0.
    """
    if cr_weight < 0:
        raise ConfigError("cr_weight must be non-negative")
    prior = validate_prior(prior, np.shape(logits)[-1])
    return -cr_weight * np.sum(ce_per_label(logits) * prior, axis=-1)


def combined_loss(
    logits: np.ndarray, labels: np.ndarray, prior: np.ndarray, cr_weight: float
) -> np.ndarray:
    """Training loss CE + CR. Reduces to plain CE at cr_weight == 0; may be negative."""
    return ce_loss(logits, labels) + cr_loss(logits, prior, cr_weight)


def select_clean(ce_all: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Boolean mask keeping example n iff CE(label_n) < mean over all L labels.

    `ce_all` is the (N, L) matrix of cross-entropies against every label,
    e.g. from `ce_per_label`. An exactly uniform prediction sits on the
    boundary (difference 0) and is NOT selected.
    """
    ce_all = np.asarray(ce_all)
    labels = np.asarray(labels)
    own = np.take_along_axis(ce_all, labels[:, None], axis=1)[:, 0]
    return own - ce_all.mean(axis=1) < 0.0


def select_clean_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return select_clean(ce_per_label(logits), labels)


def selector_violations(logits: np.ndarray, labels: np.ndarray) -> int:
    """Count examples with predicted p(label) > 1/L that the selector rejects.

    Only examples strictly better than a random guess enter the check; the
    mathematically expected count is zero (test oracle, see module docstring).
    """
    probs = softmax(logits)
    num_classes = probs.shape[-1]
    p_label = np.take_along_axis(probs, np.asarray(labels)[:, None], axis=1)[:, 0]
    better_than_random = p_label > 1.0 / num_classes
    selected = select_clean_from_logits(logits, labels)
    return int(np.count_nonzero(better_than_random & ~selected))
