import os
from pathlib import Path

import pytest

from modules.datasets import dataset_path, load_dataset, load_registry, prepare, smote_balance
from modules.datasets.model import SplitSpec

RAW_DIR_ENV = "HEWNN_RAW_DIR"
PROJECT_ROOT = Path(__file__).resolve().parents[2]

pytestmark = pytest.mark.integration

REGISTRY = load_registry(PROJECT_ROOT / "data" / "schemas")


@pytest.fixture(scope="session")
def raw_dir():
    return Path(os.getenv(RAW_DIR_ENV, PROJECT_ROOT / "data" / "raw"))


def _load(name, raw_dir):
    schema = REGISTRY[name]
    path = dataset_path(schema, raw_dir)
    if not path.exists():
        pytest.skip(f"{path} not present; run `python src/main.py datasets --fetch --pin`")
    return schema, load_dataset(path, schema)


@pytest.mark.parametrize("name", sorted(REGISTRY))
def test_fixture_matches_expected_counts(name, raw_dir):
    schema, data = _load(name, raw_dir)

    expected = schema.expected
    assert data.n_samples == expected.samples
    assert data.class_counts() == {0: expected.class_0, 1: expected.class_1}
    assert data.n_features == len(schema.columns) - 1


def test_fertility_is_balanced_by_smote(raw_dir):
    _, data = _load("fertility", raw_dir)

    assert smote_balance(data).class_counts() == {0: 88, 1: 88}


def test_haberman_stratified_split(raw_dir):
    schema, data = _load("haberman", raw_dir)

    prepared = prepare(data, schema, SplitSpec(test_fraction=0.2, seed=0))

    assert prepared.train.n_samples == 245
    assert prepared.test.n_samples == 61
