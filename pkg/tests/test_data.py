from pathlib import Path

import numpy as np
import pytest
import yaml

from modules.datasets import fetch, loader, preprocessing, registry
from modules.datasets.model import Dataset, ScalerRecord, SplitSpec
from modules.errors import BalanceError, ConfigError, DataLoadError, ShapeError, SplitError

SCHEMA_DIR = Path(__file__).resolve().parents[1] / "data" / "schemas"


def _write_schema(tmp_path, **overrides):
    doc = {
        "name": "toy",
        "file": "toy.csv",
        "columns": ["x1", "x2", "label"],
        "target": "label",
        "label_map": {"a": 0, "b": 1},
        "group": "health",
    }
    doc.update(overrides)
    path = tmp_path / f"{doc['name']}.yaml"
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


def _toy(tmp_path, rows, **overrides):
    schema = registry.load_schema(_write_schema(tmp_path, **overrides))
    data_path = tmp_path / schema.file
    data_path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return schema, data_path


def _labelled(n0, n1, n_features=2, seed=0):
    rng = np.random.default_rng(seed)
    features = rng.normal(size=(n0 + n1, n_features))
    labels = np.array([0] * n0 + [1] * n1)
    return Dataset("synthetic", features, labels, tuple(f"f{i}" for i in range(n_features)))


# --- loading ---------------------------------------------------------------------


def test_load_dataset_maps_labels_and_parses_numbers(tmp_path):
    schema, path = _toy(tmp_path, ["1.5, 2,a", "3,-4.25,b", " 0 ,0, b"])

    data = loader.load_dataset(path, schema)

    assert data.features.tolist() == [[1.5, 2.0], [3.0, -4.25], [0.0, 0.0]]
    assert data.labels.tolist() == [0, 1, 1]
    assert data.feature_names == ("x1", "x2")
    assert data.provenance == ("load",)
    assert data.group == "health"


def test_numeric_labels_accept_float_spelling(tmp_path):
    schema, path = _toy(tmp_path, ["1,2,1", "3,4,2.0"], label_map={1: 0, 2: 1})

    assert loader.load_dataset(path, schema).labels.tolist() == [0, 1]


def test_header_row_is_skipped_and_counted(tmp_path):
    schema, path = _toy(tmp_path, ["x1,x2,label", "1,2,a", "3,,b"], header=True)

    with pytest.raises(DataLoadError, match=r"Missing value \(row 3, column 'x2'\)"):
        loader.load_dataset(path, schema)


@pytest.mark.parametrize(
    "rows, message",
    [
        (["1,2,a", "1,,b"], r"Missing value \(row 2, column 'x2'\)"),
        (["1,2,a", "1,2,b", "abc,2,a"], r"Unparseable numeric value 'abc' \(row 3, column 'x1'\)"),
        (["1,2,a", "1,2,c"], r"Unknown class label 'c' \(row 2, column 'label'\)"),
        (["1,2", "3,4"], "has 2 columns, schema 'toy' expects 3"),
    ],
)
def test_loader_errors_name_row_and_column(tmp_path, rows, message):
    schema, path = _toy(tmp_path, rows)

    with pytest.raises(DataLoadError, match=message):
        loader.load_dataset(path, schema)


def test_missing_file_is_reported(tmp_path):
    schema = registry.load_schema(_write_schema(tmp_path))

    with pytest.raises(DataLoadError, match="not found"):
        loader.load_dataset(tmp_path / "absent.csv", schema)


def test_categorical_levels_are_ordinal_encoded(tmp_path):
    schema, path = _toy(
        tmp_path,
        ["P,N,NB", "A,P,B", "N,A,B"],
        label_map={"NB": 0, "B": 1},
        categorical={"x1": {"N": 0, "A": 1, "P": 2}, "x2": {"N": 0, "A": 1, "P": 2}},
        preprocessing={"standardize": False, "ordinal_encode": True},
    )

    data = loader.load_dataset(path, schema)

    assert data.features.tolist() == [[2, 0], [1, 2], [0, 1]]
    assert data.labels.tolist() == [0, 1, 1]
    assert data.provenance == ("ordinal_encode",)


def test_unknown_categorical_level_is_rejected(tmp_path):
    schema, path = _toy(tmp_path, ["N,1,a", "Q,2,b"], categorical={"x1": {"N": 0, "P": 1}})

    with pytest.raises(DataLoadError, match=r"Unknown categorical level 'Q' \(row 2, column 'x1'\)"):
        loader.load_dataset(path, schema)


def test_dataset_rejects_inconsistent_arrays():
    with pytest.raises(ShapeError, match="labels"):
        Dataset("bad", np.zeros((3, 2)), np.zeros(2), ("a", "b"))
    with pytest.raises(ShapeError, match="names"):
        Dataset("bad", np.zeros((3, 2)), np.zeros(3), ("a",))


# --- registry --------------------------------------------------------------------


def test_registry_lists_the_seven_benchmarks():
    schemas = registry.load_registry(SCHEMA_DIR)

    assert set(schemas) == {
        "banknote",
        "breast_cancer_coimbra",
        "diabetes",
        "fertility",
        "haberman",
        "heart_disease",
        "qualitative_bankruptcy",
    }
    assert schemas["fertility"].preprocessing.smote is True
    assert schemas["qualitative_bankruptcy"].group == "finance"
    assert schemas["haberman"].expected.samples == 306


def test_get_schema_unknown_name():
    with pytest.raises(ConfigError, match="Unknown dataset 'iris'"):
        registry.get_schema("iris", SCHEMA_DIR)


@pytest.mark.parametrize(
    "overrides, message",
    [
        ({"target": "outcome"}, "not listed in columns"),
        ({"label_map": {"a": 0, "b": 2}}, "exactly"),
        ({"categorical": {"x1": {"N": 0, "P": 0}}}, "not injective"),
        ({"group": "retail"}, "group"),
    ],
)
def test_invalid_schema_is_a_config_error(tmp_path, overrides, message):
    path = _write_schema(tmp_path, **overrides)

    with pytest.raises(ConfigError, match=message):
        registry.load_schema(path)


def test_missing_schema_dir(tmp_path):
    with pytest.raises(ConfigError, match="Schema directory not found"):
        registry.load_registry(tmp_path / "nowhere")


# --- preprocessing ---------------------------------------------------------------


def test_standardize_fits_on_train_only():
    train = Dataset("t", np.array([[1.0, 5.0], [3.0, 5.0]]), np.array([0, 1]), ("a", "b"))
    test = Dataset("t", np.array([[5.0, 7.0]]), np.array([1]), ("a", "b"))

    scaled_train, (scaled_test,), scaler = preprocessing.standardize(train, [test])

    assert scaled_train.features.tolist() == [[-1.0, 0.0], [1.0, 0.0]]
    assert scaled_test.features.tolist() == [[3.0, 0.0]]
    assert scaler.zero_variance == ["b"]
    assert scaled_test.provenance == ("standardize",)


def test_standardized_train_has_zero_mean_unit_std():
    scaled, _, _ = preprocessing.standardize(_labelled(30, 30, n_features=4))

    assert np.allclose(scaled.features.mean(axis=0), 0.0)
    assert np.allclose(scaled.features.std(axis=0), 1.0)


def test_scaler_record_roundtrip(tmp_path):
    scaler = preprocessing.fit_scaler(_labelled(5, 5))

    loaded = ScalerRecord.load(scaler.save(tmp_path / "scaler.yaml"))

    assert loaded.feature_names == scaler.feature_names
    assert np.allclose(loaded.mean, scaler.mean)
    assert np.allclose(loaded.std, scaler.std)


def test_smote_balances_by_interpolating_minority_neighbours():
    data = _labelled(88, 12, n_features=3, seed=4)

    balanced = preprocessing.smote_balance(data, k_neighbors=5, rng=np.random.default_rng(0))

    assert balanced.class_counts() == {0: 88, 1: 88}
    assert np.array_equal(balanced.features[:100], data.features)
    assert balanced.provenance == ("smote",)
    minority = data.features[data.labels == 1]
    for i, point in enumerate(balanced.features[100:]):
        base = minority[i % len(minority)]
        on_segment = False
        for partner in minority:
            direction = partner - base
            if not direction.any():
                continue
            u = float(np.dot(point - base, direction) / np.dot(direction, direction))
            if 0 < u < 1 and np.allclose(base + u * direction, point):
                on_segment = True
                break
        assert on_segment


def test_smote_is_deterministic_and_skips_balanced_data():
    data = _labelled(20, 5)
    first = preprocessing.smote_balance(data, rng=np.random.default_rng(3))
    second = preprocessing.smote_balance(data, rng=np.random.default_rng(3))
    balanced = _labelled(4, 4)

    assert np.array_equal(first.features, second.features)
    assert preprocessing.smote_balance(balanced) is balanced


def test_smote_needs_two_minority_samples():
    with pytest.raises(BalanceError, match="at least 2 minority"):
        preprocessing.smote_balance(_labelled(10, 1))


def test_stratified_split_sizes():
    data = _labelled(225, 81)

    train, test = preprocessing.split(data, SplitSpec(test_fraction=0.2, seed=0))

    assert train.n_samples == 245
    assert test.n_samples == 61
    assert test.class_counts() == {0: 45, 1: 16}
    assert train.name == "synthetic-train"
    assert set(map(tuple, train.features)).isdisjoint(map(tuple, test.features))


def test_unstratified_split_is_seeded():
    data = _labelled(225, 81)
    spec = SplitSpec(stratified=False, seed=7)

    first_train, first_test = preprocessing.split(data, spec)
    _, second_test = preprocessing.split(data, spec)

    assert first_test.n_samples == 61
    assert np.array_equal(first_test.features, second_test.features)
    assert first_train.n_samples + first_test.n_samples == 306


def test_split_that_empties_a_class_is_rejected():
    with pytest.raises(SplitError, match="leaves synthetic-test with classes"):
        preprocessing.split(_labelled(9, 1), SplitSpec(test_fraction=0.2))


def test_prepare_follows_schema_flags(tmp_path):
    schema = registry.load_schema(
        _write_schema(tmp_path, preprocessing={"standardize": True, "smote": True})
    )
    data = _labelled(40, 10).derive("load")

    prepared = preprocessing.prepare(data, schema, SplitSpec(seed=1), smote_k=3)

    assert prepared.trace == ["load", "smote", "split", "standardize"]
    assert prepared.train.n_samples + prepared.test.n_samples == 80
    assert prepared.scaler is not None
    assert np.allclose(prepared.train.features.mean(axis=0), 0.0)


def test_prepare_without_standardize_keeps_raw_features(tmp_path):
    schema = registry.load_schema(_write_schema(tmp_path, preprocessing={"standardize": False}))

    prepared = preprocessing.prepare(_labelled(20, 20), schema)

    assert prepared.scaler is None
    assert prepared.trace == ["split"]


# --- fetch -----------------------------------------------------------------------


def test_checksum_verification(tmp_path):
    path = tmp_path / "toy.csv"
    path.write_bytes(b"1,2,a\n")
    digest = fetch.file_sha256(path)
    plain = registry.load_schema(_write_schema(tmp_path))
    pinned = plain.model_copy(update={"sha256": digest.upper()})
    wrong = plain.model_copy(update={"sha256": "0" * 64})

    assert fetch.verify_checksum(path, plain) is None
    assert fetch.verify_checksum(path, pinned) is True
    assert fetch.verify_checksum(path, wrong) is False


def test_pin_checksum_writes_digest_once(tmp_path):
    schema_path = _write_schema(tmp_path, sha256=None)
    schema_path.write_text("# toy fixture\n" + schema_path.read_text(encoding="utf-8"), encoding="utf-8")
    path = tmp_path / "toy.csv"
    path.write_bytes(b"1,2,a\n")

    digest = fetch.pin_checksum(schema_path, path)

    pinned = registry.load_schema(schema_path)
    assert pinned.sha256 == digest == fetch.file_sha256(path)
    assert schema_path.read_text(encoding="utf-8").startswith("# toy fixture\n")
    assert fetch.verify_checksum(path, pinned) is True
    assert fetch.pin_checksum(schema_path, path) == digest

    path.write_bytes(b"1,2,b\n")
    with pytest.raises(DataLoadError, match="Checksum mismatch"):
        fetch.pin_checksum(schema_path, path)


def test_pin_checksum_appends_missing_key(tmp_path):
    schema_path = _write_schema(tmp_path)
    path = tmp_path / "toy.csv"
    path.write_bytes(b"3,4,b\n")

    fetch.pin_checksum(schema_path, path)

    assert registry.load_schema(schema_path).sha256 == fetch.file_sha256(path)


def test_fetch_keeps_existing_file(tmp_path):
    schema, path = _toy(tmp_path, ["1,2,a"])

    assert fetch.fetch_dataset(schema, tmp_path) == path
    assert fetch.dataset_path(schema, tmp_path) == path


def test_fetch_without_source_url(tmp_path):
    schema = registry.load_schema(_write_schema(tmp_path))

    with pytest.raises(DataLoadError, match="no source_url"):
        fetch.fetch_dataset(schema, tmp_path / "raw")
