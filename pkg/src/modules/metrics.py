"""Accuracy and rank-based ROC AUC."""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import ContractViolationError, ShapeError, UndefinedAucError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    auc: Optional[float]
    n: int
    tp: int
    fp: int
    tn: int
    fn: int


def _pair(a: Sequence, b: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size == 0:
        raise ContractViolationError("Metrics need at least one sample")
    if a.shape != b.shape:
        raise ShapeError(f"Length mismatch: {a.size} vs {b.size}")
    return a, b


def accuracy(labels: Sequence[int], predictions: Sequence[int]) -> float:
    labels, predictions = _pair(labels, predictions)
    return float(np.mean(labels.astype(int) == predictions.astype(int)))


def auc(labels: Sequence[int], scores: Sequence[float]) -> float:
    """Mann-Whitney U / (P * Q) over midranks, so ties count one half."""
    labels, scores = _pair(labels, scores)
    positive = labels.astype(int) == 1
    n_pos = int(positive.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAucError("AUC needs both classes present")
    ranks = rankdata(scores.astype(float), method="average")
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(labels: Sequence[int], predictions: Sequence[int]) -> Tuple[int, int, int, int]:
    labels, predictions = _pair(labels, predictions)
    labels = labels.astype(int)
    predictions = predictions.astype(int)
    tp = int(np.sum((labels == 1) & (predictions == 1)))
    fp = int(np.sum((labels == 0) & (predictions == 1)))
    tn = int(np.sum((labels == 0) & (predictions == 0)))
    fn = int(np.sum((labels == 1) & (predictions == 0)))
    return tp, fp, tn, fn


def evaluate(labels: Sequence[int], predictions: Sequence[int], scores: Sequence[float]) -> Metrics:
    tp, fp, tn, fn = confusion(labels, predictions)
    try:
        area = auc(labels, scores)
    except UndefinedAucError:
        logger.warning("Single-class evaluation set; AUC left undefined")
        area = None
    n = tp + fp + tn + fn
    return Metrics(accuracy=(tp + tn) / n, auc=area, n=n, tp=tp, fp=fp, tn=tn, fn=fn)
