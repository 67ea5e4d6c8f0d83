"""Dataset containers, split specification and the scaler record."""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field

from ..errors import FormatError, ShapeError


@dataclass(frozen=True)
class Dataset:
    name: str
    features: np.ndarray
    labels: np.ndarray
    feature_names: Tuple[str, ...]
    group: str = ""
    provenance: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        if features.ndim == 1 and features.size == 0:
            features = features.reshape(0, len(self.feature_names))
        labels = np.asarray(self.labels, dtype=int).ravel()
        if features.ndim != 2:
            raise ShapeError(f"Features must be a 2-D matrix, got shape {features.shape}")
        if features.shape[0] != labels.shape[0]:
            raise ShapeError(f"{features.shape[0]} feature rows but {labels.shape[0]} labels")
        if features.shape[1] != len(self.feature_names):
            raise ShapeError(f"{features.shape[1]} feature columns but {len(self.feature_names)} names")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> Dict[int, int]:
        return {c: int(np.sum(self.labels == c)) for c in (0, 1)}

    def derive(self, stage: str, features: Optional[np.ndarray] = None, labels: Optional[np.ndarray] = None, name: Optional[str] = None) -> "Dataset":
        """Copy with new arrays and ``stage`` appended to the provenance trace."""
        return replace(
            self,
            name=self.name if name is None else name,
            features=self.features if features is None else features,
            labels=self.labels if labels is None else labels,
            provenance=self.provenance + (stage,),
        )

    def subset(self, indices: np.ndarray, suffix: str) -> "Dataset":
        return self.derive(f"split:{suffix}", self.features[indices], self.labels[indices], name=f"{self.name}-{suffix}")


class SplitSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    test_fraction: float = Field(0.2, gt=0, lt=1)
    stratified: bool = True
    seed: int = 0


@dataclass(frozen=True)
class ScalerRecord:
    """Per-feature mean and standard deviation fitted on a training set.

    File form (YAML): ``feature_names`` list, ``mean`` list, ``std`` list, and
    ``zero_variance`` listing the columns mapped to 0.
    """

    feature_names: Tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray

    @property
    def zero_variance(self) -> List[str]:
        return [name for name, s in zip(self.feature_names, self.std) if s == 0]

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        if features.shape[1] != len(self.mean):
            raise ShapeError(f"Scaler fitted on {len(self.mean)} features, got {features.shape[1]}")
        safe = np.where(self.std == 0, 1.0, self.std)
        out = (features - self.mean) / safe
        out[:, self.std == 0] = 0.0
        return out

    def save(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "feature_names": list(self.feature_names),
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "zero_variance": self.zero_variance,
        }
        with open(path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(doc, handle, sort_keys=False)
        return path

    @classmethod
    def load(cls, path: Path) -> "ScalerRecord":
        with open(path, "r", encoding="utf-8") as handle:
            doc = yaml.safe_load(handle)
        try:
            return cls(
                feature_names=tuple(doc["feature_names"]),
                mean=np.asarray(doc["mean"], dtype=float),
                std=np.asarray(doc["std"], dtype=float),
            )
        except (KeyError, TypeError) as exc:
            raise FormatError(f"Malformed scaler record {path}: {exc}") from exc
