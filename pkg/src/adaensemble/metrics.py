"""AUC and LogLoss."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .autograd import Tensor

CLAMP = 1e-7


class MetricInputError(ValueError):
    pass


def _check(preds, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(preds, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise MetricInputError(f"{p.size} predictions for {y.size} labels")
    if p.size == 0:
        raise MetricInputError("metrics need at least one example")
    return p, y


def logloss(preds, labels) -> float:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7]."""
    p, y = _check(preds, labels)
    p = np.clip(p, CLAMP, 1.0 - CLAMP)
    terms = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    # fsum keeps the mean independent of summation order
    return -math.fsum(terms) / p.size


def binary_cross_entropy(preds: Tensor, labels) -> Tensor:
    """Differentiable LogLoss on a prediction tensor."""
    y = np.asarray(labels, dtype=np.float64).reshape(preds.shape)
    p = ag.clip(preds, CLAMP, 1.0 - CLAMP)
    terms = ag.log(p) * ag.Tensor(y) + ag.log(1.0 - p) * ag.Tensor(1.0 - y)
    return -ag.mean(terms)


def auc(preds, labels) -> float:
    """Mann-Whitney AUC from average ranks; tied scores count one half."""
    p, y = _check(preds, labels)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricInputError("AUC is undefined when only one class is present")
    ranks = rankdata(p)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))
