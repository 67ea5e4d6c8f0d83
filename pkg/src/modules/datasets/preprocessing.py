"""Standardization, SMOTE balancing, stratified splitting and the prepare pipeline."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from ..errors import BalanceError, SplitError
from .model import Dataset, ScalerRecord, SplitSpec
from .registry import DatasetSchema

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

DEFAULT_SMOTE_K = 5


def fit_scaler(train: Dataset) -> ScalerRecord:
    mean = train.features.mean(axis=0)
    std = train.features.std(axis=0)
    record = ScalerRecord(feature_names=train.feature_names, mean=mean, std=std)
    if record.zero_variance:
        logger.warning("%s: zero-variance columns mapped to 0: %s", train.name, ", ".join(record.zero_variance))
    return record


def apply_scaler(data: Dataset, scaler: ScalerRecord) -> Dataset:
    return data.derive("standardize", scaler.transform(data.features))


def standardize(train: Dataset, apply_to: Sequence[Dataset] = ()) -> Tuple[Dataset, List[Dataset], ScalerRecord]:
    """Fit mean/std on ``train`` only and transform it plus every dataset in ``apply_to``."""
    scaler = fit_scaler(train)
    logger.info("Standardized %s on %d training rows", train.name, train.n_samples)
    return apply_scaler(train, scaler), [apply_scaler(d, scaler) for d in apply_to], scaler


def smote_balance(data: Dataset, k_neighbors: int = DEFAULT_SMOTE_K, rng: Optional[np.random.Generator] = None) -> Dataset:
    """Oversample the minority class by interpolating toward its nearest minority neighbours.

    Base samples are taken round-robin over the minority class; each synthetic
    point is x + u * (neighbour - x) with u uniform on (0, 1). Original rows
    are kept in place and synthetic rows appended.
    """
    rng = rng or np.random.default_rng(0)
    counts = data.class_counts()
    if counts[0] == counts[1]:
        return data
    minority_class = 0 if counts[0] < counts[1] else 1
    minority = data.features[data.labels == minority_class]
    needed = abs(counts[0] - counts[1])
    if len(minority) < 2:
        raise BalanceError(f"SMOTE needs at least 2 minority samples, {data.name} has {len(minority)}")

    k = min(k_neighbors, len(minority) - 1)
    distances = cdist(minority, minority)
    np.fill_diagonal(distances, np.inf)
    neighbours = np.argsort(distances, axis=1, kind="stable")[:, :k]

    low = np.nextafter(0.0, 1.0)
    synthetic = np.empty((needed, data.n_features))
    for i in range(needed):
        base = i % len(minority)
        partner = neighbours[base, rng.integers(0, k)]
        u = rng.uniform(low, 1.0)
        synthetic[i] = minority[base] + u * (minority[partner] - minority[base])

    features = np.vstack([data.features, synthetic])
    labels = np.concatenate([data.labels, np.full(needed, minority_class)])
    balanced = data.derive("smote", features, labels)
    after = balanced.class_counts()
    logger.info(
        "SMOTE balanced %s: %d/%d -> %d/%d",
        data.name,
        max(counts.values()),
        min(counts.values()),
        after[1 - minority_class],
        after[minority_class],
    )
    return balanced


def _round_half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def split(data: Dataset, spec: Optional[SplitSpec] = None) -> Tuple[Dataset, Dataset]:
    """Shuffle split, per class when stratified; deterministic under ``spec.seed``."""
    spec = spec or SplitSpec()
    rng = np.random.default_rng(spec.seed)
    if spec.stratified:
        test_parts = []
        for c in (0, 1):
            members = np.flatnonzero(data.labels == c)
            if len(members) == 0:
                continue
            take = _round_half_up(len(members) * spec.test_fraction)
            test_parts.append(rng.permutation(members)[:take])
        test_idx = np.sort(np.concatenate(test_parts)) if test_parts else np.array([], dtype=int)
    else:
        take = _round_half_up(data.n_samples * spec.test_fraction)
        test_idx = np.sort(rng.permutation(data.n_samples)[:take])
    train_idx = np.setdiff1d(np.arange(data.n_samples), test_idx)

    train, test = data.subset(train_idx, "train"), data.subset(test_idx, "test")
    for part in (train, test):
        counts = part.class_counts()
        if counts[0] == 0 or counts[1] == 0:
            raise SplitError(
                f"Split of {data.name} at test_fraction={spec.test_fraction} leaves {part.name} with classes {counts[0]}/{counts[1]}"
            )
    logger.info("Split %s: %d train / %d test", data.name, train.n_samples, test.n_samples)
    return train, test


@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    scaler: Optional[ScalerRecord]
    trace: List[str] = field(default_factory=list)


def prepare(
    data: Dataset,
    schema: DatasetSchema,
    spec: Optional[SplitSpec] = None,
    smote_k: int = DEFAULT_SMOTE_K,
) -> PreparedData:
    """Preprocessing selected by the schema flags: smote, then split, then standardize."""
    spec = spec or SplitSpec()
    trace = list(data.provenance)
    if schema.preprocessing.smote:
        data = smote_balance(data, smote_k, np.random.default_rng(spec.seed))
        trace.append("smote")
    train, test = split(data, spec)
    trace.append("split")
    scaler = None
    if schema.preprocessing.standardize:
        train, (test,), scaler = standardize(train, [test])
        trace.append("standardize")
    return PreparedData(train=train, test=test, scaler=scaler, trace=trace)
