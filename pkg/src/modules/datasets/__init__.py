from .fetch import dataset_path, fetch_dataset, file_sha256, pin_checksum, verify_checksum
from .loader import encode_categorical, load_dataset, read_table
from .model import Dataset, ScalerRecord, SplitSpec
from .preprocessing import PreparedData, apply_scaler, prepare, smote_balance, split, standardize
from .registry import DatasetSchema, get_schema, load_registry

__all__ = [
    "Dataset",
    "DatasetSchema",
    "PreparedData",
    "ScalerRecord",
    "SplitSpec",
    "apply_scaler",
    "dataset_path",
    "encode_categorical",
    "fetch_dataset",
    "file_sha256",
    "get_schema",
    "load_dataset",
    "load_registry",
    "pin_checksum",
    "prepare",
    "read_table",
    "smote_balance",
    "split",
    "standardize",
    "verify_checksum",
]
