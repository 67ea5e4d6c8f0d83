"""Per-dataset schema descriptors loaded from ``data/schemas/*.yaml``."""

import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import ConfigError

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


class ExpectedCounts(BaseModel):
    samples: int
    class_0: int
    class_1: int


class PreprocessingFlags(BaseModel):
    standardize: bool = True
    smote: bool = False
    ordinal_encode: bool = False


def _stringify_keys(mapping: Dict) -> Dict[str, int]:
    return {str(key).strip(): int(value) for key, value in mapping.items()}


class DatasetSchema(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    title: str = ""
    file: str
    header: bool = False
    columns: List[str]
    target: str
    label_map: Dict[str, int]
    categorical: Dict[str, Dict[str, int]] = Field(default_factory=dict)
    expected: Optional[ExpectedCounts] = None
    group: Literal["health", "finance"]
    preprocessing: PreprocessingFlags = Field(default_factory=PreprocessingFlags)
    source_url: Optional[str] = None
    sha256: Optional[str] = None

    @field_validator("label_map", mode="before")
    @classmethod
    def _normalize_labels(cls, value):
        return _stringify_keys(value or {})

    @field_validator("categorical", mode="before")
    @classmethod
    def _normalize_levels(cls, value):
        return {column: _stringify_keys(levels) for column, levels in (value or {}).items()}

    @model_validator(mode="after")
    def _check_columns(self) -> "DatasetSchema":
        if self.target not in self.columns:
            raise ValueError(f"target column '{self.target}' is not listed in columns")
        if len(set(self.columns)) != len(self.columns):
            raise ValueError("column names must be unique")
        if sorted(set(self.label_map.values())) != [0, 1]:
            raise ValueError("label_map must map onto exactly {0, 1}")
        for column, levels in self.categorical.items():
            if column not in self.columns:
                raise ValueError(f"categorical column '{column}' is not listed in columns")
            if len(set(levels.values())) != len(levels):
                raise ValueError(f"categorical mapping for '{column}' is not injective")
        return self

    @property
    def feature_columns(self) -> List[str]:
        return [c for c in self.columns if c != self.target]


def load_schema(path: Path) -> DatasetSchema:
    with open(path, "r", encoding="utf-8") as handle:
        raw = yaml.safe_load(handle) or {}
    try:
        return DatasetSchema(**raw)
    except ValidationError as exc:
        raise ConfigError(f"Invalid dataset schema {path}: {exc}") from exc


def load_registry(schema_dir: Path) -> Dict[str, DatasetSchema]:
    schema_dir = Path(schema_dir)
    if not schema_dir.is_dir():
        raise ConfigError(f"Schema directory not found: {schema_dir}")
    registry: Dict[str, DatasetSchema] = {}
    for path in sorted(schema_dir.glob("*.yaml")):
        schema = load_schema(path)
        if schema.name in registry:
            raise ConfigError(f"Duplicate dataset name '{schema.name}' in {path}")
        registry[schema.name] = schema
    logger.debug("Loaded %d dataset schemas from %s", len(registry), schema_dir)
    return registry


def get_schema(name: str, schema_dir: Path) -> DatasetSchema:
    registry = load_registry(schema_dir)
    try:
        return registry[name]
    except KeyError:
        raise ConfigError(f"Unknown dataset '{name}'; known: {', '.join(sorted(registry))}") from None
