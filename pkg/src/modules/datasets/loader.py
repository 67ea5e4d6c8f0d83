"""CSV ingestion driven by a ``DatasetSchema``."""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from ..errors import DataLoadError
from .model import Dataset
from .registry import DatasetSchema

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def read_table(path: Path, schema: DatasetSchema) -> pd.DataFrame:
    """Read every cell as stripped text; arity and completeness are checked here."""
    path = Path(path)
    if not path.exists():
        raise DataLoadError(f"Dataset file not found: {path}")
    try:
        frame = pd.read_csv(
            path,
            header=0 if schema.header else None,
            dtype=str,
            keep_default_na=False,
            skipinitialspace=True,
            skip_blank_lines=True,
            encoding="utf-8",
        )
    except pd.errors.ParserError as exc:
        raise DataLoadError(f"Malformed CSV {path.name}: {exc}") from exc

    if frame.shape[1] != len(schema.columns):
        raise DataLoadError(
            f"{path.name} has {frame.shape[1]} columns, schema '{schema.name}' expects {len(schema.columns)}"
        )
    frame.columns = schema.columns
    frame = frame.apply(lambda column: column.str.strip())
    offset = 2 if schema.header else 1
    for position, (_, row) in enumerate(frame.iterrows()):
        for column in schema.columns:
            if row[column] == "" or pd.isna(row[column]):
                raise DataLoadError("Missing value", row=position + offset, column=column)
    frame.attrs["row_offset"] = offset
    return frame


def _numeric_column(frame: pd.DataFrame, column: str) -> np.ndarray:
    values = pd.to_numeric(frame[column], errors="coerce")
    bad = values.isna()
    if bad.any():
        position = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataLoadError(
            f"Unparseable numeric value '{frame[column].iloc[position]}'",
            row=position + frame.attrs.get("row_offset", 1),
            column=column,
        )
    return values.to_numpy(dtype=float)


def _mapped_column(frame: pd.DataFrame, column: str, mapping: dict, what: str) -> np.ndarray:
    mapped = frame[column].map(mapping)
    unknown = mapped.isna()
    if unknown.any():
        position = int(np.flatnonzero(unknown.to_numpy())[0])
        raise DataLoadError(
            f"Unknown {what} '{frame[column].iloc[position]}'",
            row=position + frame.attrs.get("row_offset", 1),
            column=column,
        )
    return mapped.to_numpy()


def encode_categorical(frame: pd.DataFrame, schema: DatasetSchema) -> Dataset:
    """Apply the schema's ordinal level maps and label map to a raw text table."""
    columns = []
    for column in schema.feature_columns:
        if column in schema.categorical:
            columns.append(_mapped_column(frame, column, schema.categorical[column], "categorical level").astype(float))
        else:
            columns.append(_numeric_column(frame, column))
    labels = _label_column(frame, schema)
    features = np.column_stack(columns) if columns else np.zeros((len(frame), 0))
    stage = "ordinal_encode" if schema.categorical else "load"
    return Dataset(
        name=schema.name,
        features=features,
        labels=labels,
        feature_names=tuple(schema.feature_columns),
        group=schema.group,
        provenance=(stage,),
    )


def _label_column(frame: pd.DataFrame, schema: DatasetSchema) -> np.ndarray:
    target = frame[schema.target]
    normalized = target.map(lambda v: _normalize_label(v, schema))
    unknown = normalized.isna()
    if unknown.any():
        position = int(np.flatnonzero(unknown.to_numpy())[0])
        raise DataLoadError(
            f"Unknown class label '{target.iloc[position]}'",
            row=position + frame.attrs.get("row_offset", 1),
            column=schema.target,
        )
    return normalized.to_numpy(dtype=int)


def _normalize_label(value: str, schema: DatasetSchema) -> Optional[int]:
    if value in schema.label_map:
        return schema.label_map[value]
    try:
        as_number = float(value)
    except ValueError:
        return None
    if as_number.is_integer() and str(int(as_number)) in schema.label_map:
        return schema.label_map[str(int(as_number))]
    return None


def load_dataset(path: Path, schema: DatasetSchema) -> Dataset:
    frame = read_table(path, schema)
    dataset = encode_categorical(frame, schema)
    counts = dataset.class_counts()
    logger.info("Loaded %s: %d samples, %d features, classes %d/%d", schema.name, dataset.n_samples, dataset.n_features, counts[0], counts[1])
    if schema.expected is not None:
        expected = (schema.expected.samples, schema.expected.class_0, schema.expected.class_1)
        actual = (dataset.n_samples, counts[0], counts[1])
        if expected != actual:
            logger.warning("%s counts %s differ from the expected %s", schema.name, actual, expected)
    return dataset
