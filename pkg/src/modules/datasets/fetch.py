"""Download fixtures listed in the schema registry and verify their checksums."""

import hashlib
import logging
import re
import urllib.request
from pathlib import Path
from typing import Optional

from ..errors import DataLoadError
from .registry import DatasetSchema, load_schema

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def verify_checksum(path: Path, schema: DatasetSchema) -> Optional[bool]:
    """True/False against the recorded sha256, None when the schema records none."""
    if schema.sha256 is None:
        return None
    return file_sha256(path) == schema.sha256.lower()


def dataset_path(schema: DatasetSchema, raw_dir: Path) -> Path:
    return Path(raw_dir) / schema.file


def fetch_dataset(schema: DatasetSchema, raw_dir: Path, overwrite: bool = False, timeout: float = 30.0) -> Path:
    target = dataset_path(schema, raw_dir)
    if target.exists() and not overwrite:
        logger.info("%s already present at %s", schema.name, target)
        return target
    if not schema.source_url:
        raise DataLoadError(f"{schema.name} has no source_url; place {schema.file} in {raw_dir} manually")
    target.parent.mkdir(parents=True, exist_ok=True)
    logger.info("Fetching %s from %s", schema.name, schema.source_url)
    try:
        with urllib.request.urlopen(schema.source_url, timeout=timeout) as response:
            payload = response.read()
    except OSError as exc:
        raise DataLoadError(f"Download of {schema.name} failed: {exc}") from exc
    target.write_bytes(payload)
    if verify_checksum(target, schema) is False:
        target.unlink()
        raise DataLoadError(f"Checksum mismatch for {schema.name}; file removed")
    return target


_SHA256_LINE = re.compile(r"^sha256:.*$", re.MULTILINE)


def pin_checksum(schema_path: Path, data_path: Path) -> str:
    """Record the fixture's sha256 in its schema file, leaving the rest of the YAML untouched.

    A schema that already pins a different digest is left alone and the
    mismatch is raised.
    """
    schema_path = Path(schema_path)
    schema = load_schema(schema_path)
    digest = file_sha256(data_path)
    if schema.sha256 is not None:
        if schema.sha256.lower() != digest:
            raise DataLoadError(f"Checksum mismatch for {schema.name}: schema pins {schema.sha256}, file is {digest}")
        return digest
    text = schema_path.read_text(encoding="utf-8")
    line = f"sha256: {digest}"
    if _SHA256_LINE.search(text):
        text = _SHA256_LINE.sub(line, text, count=1)
    else:
        text = text.rstrip("\n") + f"\n{line}\n"
    schema_path.write_text(text, encoding="utf-8")
    logger.info("Pinned %s sha256 %s in %s", schema.name, digest[:12], schema_path)
    return digest
