import pytest

from src.main import (
    OUTPUT_DIR_ENV,
    RunConfig,
    build_run_config,
    ckks_params_from_config,
    validate_config,
)


def _base_config(tmp_path):
    return {
        "project": {
            "name": "demo_project",
            "db_file": str(tmp_path / "db.sqlite"),
            "output_dir": str(tmp_path / "output"),
        },
        "logging": {"level": "INFO", "file": ""},
        "ckks": {"profile": "test-insecure", "poly_degree": 64},
        "training": {"eta": 0.1, "batch_size": 8},
    }


def test_validate_config_normalizes_paths(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    monkeypatch.setenv("DATA_ROOT", str(tmp_path / "nested"))
    config = _base_config(tmp_path)
    config["project"]["output_dir"] = "$DATA_ROOT/output"
    config["logging"]["file"] = "$DATA_ROOT/logs/app.log"

    validated = validate_config(config)

    assert validated["project"]["output_dir"].endswith("nested/output")
    assert validated["logging"]["file"].endswith("nested/logs/app.log")


def test_output_dir_env_overrides_config(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "elsewhere"))

    validated = validate_config(_base_config(tmp_path))

    assert validated["project"]["output_dir"] == str(tmp_path / "elsewhere")


@pytest.mark.parametrize(
    "field, message",
    [
        ("name", "project.name"),
        ("db_file", "project.db_file"),
    ],
)
def test_validate_config_requires_project_fields(tmp_path, field, message):
    config = _base_config(tmp_path)
    config["project"].pop(field)

    with pytest.raises(ValueError, match=message):
        validate_config(config)


def test_validate_config_fills_defaults(tmp_path):
    validated = validate_config(_base_config(tmp_path))

    assert validated["data"]["test_fraction"] == 0.2
    assert validated["data"]["smote_k"] == 5
    assert validated["training"]["alpha"] == 0.9
    assert validated["training"]["stop_rule"] == "either"
    assert validated["training"]["batch_size"] == 8


@pytest.mark.parametrize(
    "section, key, value, message",
    [
        ("training", "eta", 0, "training:"),
        ("training", "alpha", 1.0, "training:"),
        ("training", "stop_rule", "sometimes", "training:"),
        ("ckks", "profile", "fast", "ckks.profile"),
        ("ckks", "scale_bits", 70, "ckks:"),
        ("data", "test_fraction", 1.0, "test_fraction"),
        ("data", "smote_k", 0, "smote_k"),
        ("logging", "level", "LOUD", "logging.level"),
    ],
)
def test_validate_config_rejects_bad_values(tmp_path, section, key, value, message):
    config = _base_config(tmp_path)
    config.setdefault(section, {})[key] = value

    with pytest.raises(ValueError, match=message):
        validate_config(config)


def test_ckks_section_resolution():
    assert ckks_params_from_config({"profile": "secure", "poly_degree": 64}).poly_degree == 32768
    insecure = ckks_params_from_config({"profile": "test-insecure", "poly_degree": 64})
    assert insecure.max_depth == 10
    assert insecure.poly_degree == 64
    explicit = ckks_params_from_config(
        {"profile": "test-insecure", "poly_degree": 128, "coeff_modulus_bits": [50, 30, 50], "scale_bits": 30}
    )
    assert explicit.coeff_modulus_bits == (50, 30, 50)


def test_encrypted_run_rejects_exact_activation(tmp_path):
    config = validate_config(_base_config(tmp_path))

    with pytest.raises(ValueError, match="requires activation=poly"):
        build_run_config(config, "haberman", "encrypted", {"activation": "exact"})


def test_run_config_resolves_activation_and_overrides(tmp_path):
    config = validate_config(_base_config(tmp_path))

    run = build_run_config(
        config, "haberman", "encrypted", {"training": {"max_epochs": 3}, "output_dir": str(tmp_path / "o")}
    )

    assert isinstance(run, RunConfig)
    assert run.resolved_activation == "poly"
    assert run.training.max_epochs == 3
    assert run.training.batch_size == 8
    assert run.output_dir == str(tmp_path / "o")
    assert RunConfig(dataset="haberman").resolved_activation == "exact"
