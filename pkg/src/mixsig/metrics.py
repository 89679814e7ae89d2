"""Scores for predicted mixture weights and predicted classes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln
from scipy.stats import rankdata

from .errors import DimensionMismatch, SingleClassTruth

NLPD_CLIP = 1e-6
LPP_FLOOR = 1e-12


@dataclass(frozen=True)
class RegressionMetrics:
    mse: float
    rmse: float
    nlpd: float


@dataclass(frozen=True)
class ClassificationMetrics:
    accuracy: float
    lpp: float
    roc_auc: float


def dirichlet_log_density(alpha, x) -> np.ndarray:
    """Row-wise log Dirichlet density; ``x`` must lie inside the simplex."""
    alpha = np.asarray(alpha, dtype=float)
    x = np.asarray(x, dtype=float)
    return (
        gammaln(alpha.sum(axis=-1))
        - gammaln(alpha).sum(axis=-1)
        + np.sum((alpha - 1.0) * np.log(x), axis=-1)
    )


def clip_to_simplex_interior(r, eps=NLPD_CLIP) -> np.ndarray:
    r = np.clip(np.asarray(r, dtype=float), eps, 1.0 - eps)
    return r / r.sum(axis=-1, keepdims=True)


def regression_metrics(alpha, truth) -> RegressionMetrics:
    """MSE of the posterior mean weights and the summed NLPD of the truth.

    Truth rows are pulled into the open simplex (coordinates clipped to
    [1e-6, 1 - 1e-6], then renormalised) before the density is evaluated,
    so pure-component rows give a finite score.
    """
    alpha = np.asarray(alpha, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if alpha.shape != truth.shape:
        raise DimensionMismatch(f"prediction shape {alpha.shape} != truth shape {truth.shape}")
    mean = alpha / alpha.sum(axis=-1, keepdims=True)
    mse = float(np.mean((mean - truth) ** 2))
    nlpd = float(-np.sum(dirichlet_log_density(alpha, clip_to_simplex_interior(truth))))
    return RegressionMetrics(mse, float(np.sqrt(mse)), nlpd)


def binary_auc(scores, positive) -> float:
    """Mann-Whitney estimate of the ROC area, ties counted as one half."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassTruth("AUC needs both positive and negative rows")
    ranks = rankdata(scores)  # midranks for ties
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def classification_metrics(probs, labels) -> ClassificationMetrics:
    """Accuracy, log predictive probability and macro one-vs-rest AUC.

    ``probs`` is (N, C); a 1-D array is read as the class-1 probability of a
    binary problem. Classes absent from (or filling) ``labels`` are left out
    of the AUC average.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.ndim == 1:
        probs = np.column_stack([1.0 - probs, probs])
    labels = np.asarray(labels).astype(int)
    if probs.shape[0] != labels.shape[0]:
        raise DimensionMismatch(f"{probs.shape[0]} predictions for {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise DimensionMismatch("label outside the predicted classes")
    rows = np.arange(labels.size)
    # argmax returns the first maximum, so ties go to the lowest index
    accuracy = float(np.mean(np.argmax(probs, axis=1) == labels))
    lpp = float(np.sum(np.log(np.maximum(probs[rows, labels], LPP_FLOOR))))
    aucs = []
    for c in range(probs.shape[1]):
        pos = labels == c
        if pos.all() or not pos.any():
            continue
        aucs.append(binary_auc(probs[:, c], pos))
    if not aucs:
        raise SingleClassTruth("every class lacks positives or negatives")
    return ClassificationMetrics(accuracy, lpp, float(np.mean(aucs)))
