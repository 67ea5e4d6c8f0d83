import os
import sys
import argparse
import logging
import time
import yaml
from contextlib import contextmanager
from copy import deepcopy
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from modules import ppwnn
from modules.ckks import CkksParams
from modules.datasets import (
    DatasetSchema,
    PreparedData,
    SplitSpec,
    dataset_path,
    fetch_dataset,
    file_sha256,
    get_schema,
    load_dataset,
    load_registry,
    pin_checksum,
    prepare,
    verify_checksum,
)
from modules.datasets.registry import load_schema
from modules.errors import ConfigError, DataLoadError, HEWNNError
from modules.metrics import evaluate
from modules.reporting import (
    ComparisonRow,
    TrainReport,
    config_hash,
    render_comparison_table,
    save_report,
    write_comparison,
    write_training_log,
)
from modules.run_store import RunStore
from modules.wnn import TrainConfig, WnnShape, predict_labels, save_checkpoint, train_plain
from quality_check import render_quality_report, run_quality_checks

logger = logging.getLogger("HEWNN")

OUTPUT_DIR_ENV = "HEWNN_OUTPUT_DIR"
DATA_SUFFIXES = {".csv", ".txt", ".data"}

DEFAULTS = {
    "project": {"output_dir": "output", "silent_mode": False},
    "logging": {
        "level": "INFO",
        "file": "",
        "format": "%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        "max_bytes": 1024 * 1024,
        "backup_count": 3,
        "module_levels": {},
    },
    "ckks": {"profile": "test-insecure"},
    "training": {},
    "data": {
        "schema_dir": "data/schemas",
        "raw_dir": "data/raw",
        "test_fraction": 0.2,
        "stratified": True,
        "seed": 0,
        "smote_k": 5,
    },
}

PATH_FIELDS = [
    ("project", "db_file"),
    ("project", "output_dir"),
    ("logging", "file"),
    ("data", "schema_dir"),
    ("data", "raw_dir"),
]


class StageFailure(HEWNNError):
    """A module error tagged with the pipeline stage it came from."""

    def __init__(self, stage: str, error: Exception):
        super().__init__(f"[{stage}] {error}")
        self.stage = stage
        self.error = error


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    dataset: str
    mode: Literal["plain", "encrypted", "compare"] = "plain"
    activation: Optional[Literal["exact", "poly"]] = None
    profile: Literal["secure", "test-insecure"] = "test-insecure"
    training: TrainConfig = Field(default_factory=TrainConfig)
    key_seed: int = 0
    output_dir: str = "output"

    @model_validator(mode="after")
    def _encrypted_needs_poly(self) -> "RunConfig":
        if self.mode == "encrypted" and self.activation == "exact":
            raise ValueError(
                "encrypted mode requires activation=poly; exp(-t^2) cannot be evaluated under CKKS"
            )
        return self

    @property
    def resolved_activation(self) -> str:
        if self.activation:
            return self.activation
        return "poly" if self.mode == "encrypted" else "exact"


# --- Helper Functions ---

def load_config(path="config.yaml"):
    if not os.path.exists(path):
        print(f"Config file not found: {path}", file=sys.stderr)
        sys.exit(1)
    with open(path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f) or {}


def _expand_path(value: Optional[str]) -> Optional[str]:
    if not value:
        return value
    return os.path.expanduser(os.path.expandvars(str(value)))


def ckks_params_from_config(section: dict) -> CkksParams:
    """Resolve the ``ckks`` section: ``secure`` preset or a training-depth test profile."""
    profile = section.get("profile", "test-insecure")
    bits = section.get("coeff_modulus_bits")
    if bits:
        return CkksParams(
            poly_degree=section.get("poly_degree") or (32768 if profile == "secure" else 8192),
            coeff_modulus_bits=tuple(bits),
            scale_bits=section.get("scale_bits") or 40,
            profile=profile,
        )
    if profile == "secure":
        return CkksParams.secure()
    return ppwnn.training_params("test-insecure", section.get("poly_degree") or 8192, section.get("scale_bits") or 40)


def validate_config(config: dict) -> dict:
    """Fill defaults, expand paths and validate every section; errors name the offending key."""
    config = deepcopy(config or {})
    for section, defaults in DEFAULTS.items():
        current = config.get(section) or {}
        if not isinstance(current, dict):
            raise ConfigError(f"{section} must be a mapping")
        config[section] = {**deepcopy(defaults), **current}

    project = config["project"]
    for key in ("name", "db_file"):
        if not project.get(key):
            raise ConfigError(f"project.{key} is required")

    env_output = os.environ.get(OUTPUT_DIR_ENV)
    if env_output:
        project["output_dir"] = env_output

    for section, key in PATH_FIELDS:
        config[section][key] = _expand_path(config[section].get(key))

    if not project.get("output_dir"):
        raise ConfigError("project.output_dir must not be empty")

    level_name = str(config["logging"].get("level", "INFO")).upper()
    if not isinstance(logging.getLevelName(level_name), int):
        raise ConfigError(f"logging.level '{level_name}' is not a logging level")
    config["logging"]["level"] = level_name

    try:
        config["training"] = TrainConfig(**config["training"]).model_dump()
    except ValidationError as exc:
        raise ConfigError(f"training: {exc}") from exc

    if config["ckks"].get("profile") not in ("secure", "test-insecure"):
        raise ConfigError("ckks.profile must be 'secure' or 'test-insecure'")
    try:
        ckks_params_from_config(config["ckks"])
    except ValidationError as exc:
        raise ConfigError(f"ckks: {exc}") from exc

    data = config["data"]
    if not 0 < float(data["test_fraction"]) < 1:
        raise ConfigError("data.test_fraction must be in (0, 1)")
    if int(data["smote_k"]) < 1:
        raise ConfigError("data.smote_k must be >= 1")
    return config


def configure_logging(config):
    log_conf = config.get("logging", {})
    log_file = log_conf.get("file", "hewnn.log")
    level_name = log_conf.get("level", "INFO").upper()
    level = getattr(logging, level_name, logging.INFO)

    handlers = [logging.StreamHandler(sys.stdout)]
    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
        handlers.append(RotatingFileHandler(
            log_file,
            maxBytes=log_conf.get("max_bytes", 1024*1024),
            backupCount=log_conf.get("backup_count", 3)
        ))

    fmt = log_conf.get("format", "%(asctime)s [%(levelname)s] %(name)s: %(message)s")
    logging.basicConfig(level=level, format=fmt, handlers=handlers, force=True)

    for name, module_level in (log_conf.get("module_levels") or {}).items():
        logging.getLogger(name).setLevel(getattr(logging, str(module_level).upper(), level))


def apply_logging_overrides(config: dict, args) -> dict:
    """``--log-level`` / ``--log-file`` take precedence over the config file."""
    log_conf = config.setdefault("logging", {})
    if getattr(args, "log_level", None):
        log_conf["level"] = args.log_level.upper()
    if getattr(args, "log_file", None) is not None:
        log_conf["file"] = args.log_file
    return config


def get_store(config) -> RunStore:
    db_path = config["project"]["db_file"]
    db_dir = os.path.dirname(db_path)
    if db_dir:
        os.makedirs(db_dir, exist_ok=True)
    store = RunStore(db_path, project_name=config["project"]["name"])
    store.init_db()
    return store


@contextmanager
def stage(name: str):
    try:
        yield
    except StageFailure:
        raise
    except HEWNNError as exc:
        raise StageFailure(name, exc) from exc


def resolve_dataset(name_or_path: str, config: dict) -> Tuple[DatasetSchema, Path]:
    """Registry name, schema YAML path, or a data file whose name a registry schema lists."""
    data_conf = config["data"]
    raw_dir = Path(data_conf["raw_dir"])
    candidate = Path(name_or_path)
    if candidate.suffix in {".yaml", ".yml"} and candidate.exists():
        schema = load_schema(candidate)
        return schema, dataset_path(schema, raw_dir)
    if candidate.suffix in DATA_SUFFIXES and candidate.exists():
        registry = load_registry(Path(data_conf["schema_dir"]))
        for schema in registry.values():
            if schema.file == candidate.name:
                return schema, candidate
        raise ConfigError(f"No dataset schema lists the file {candidate.name}")
    schema = get_schema(name_or_path, Path(data_conf["schema_dir"]))
    return schema, dataset_path(schema, raw_dir)


def build_run_config(config: dict, dataset: str, mode: str, overrides: Optional[dict] = None) -> RunConfig:
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    training = {**config["training"], **overrides.pop("training", {})}
    try:
        return RunConfig(
            dataset=dataset,
            mode=mode,
            profile=overrides.pop("profile", config["ckks"].get("profile", "test-insecure")),
            training=TrainConfig(**training),
            output_dir=overrides.pop("output_dir", config["project"]["output_dir"]),
            **overrides,
        )
    except ValidationError as exc:
        raise ConfigError(f"Invalid run configuration: {exc}") from exc


def _effective_config(run: RunConfig, config: dict, schema: DatasetSchema) -> dict:
    effective = {
        "run": run.model_dump(mode="json"),
        "activation": run.resolved_activation,
        "dataset_schema": schema.name,
        "data": {k: config["data"][k] for k in ("test_fraction", "stratified", "seed", "smote_k")},
    }
    if run.mode != "plain":
        ckks_conf = dict(config["ckks"], profile=run.profile)
        effective["ckks"] = ckks_params_from_config(ckks_conf).model_dump(mode="json")
    return effective


def _load_and_prepare(run: RunConfig, config: dict) -> Tuple[DatasetSchema, PreparedData]:
    data_conf = config["data"]
    with stage("load"):
        schema, path = resolve_dataset(run.dataset, config)
        if not path.exists():
            raise DataLoadError(f"{path} not found; run `datasets --fetch` or place the file manually")
        data = load_dataset(path, schema)
    with stage("preprocess"):
        spec = SplitSpec(
            test_fraction=data_conf["test_fraction"],
            stratified=data_conf["stratified"],
            seed=data_conf["seed"],
        )
        prepared = prepare(data, schema, spec, smote_k=data_conf["smote_k"])
    logger.info("Prepared %s: %s", schema.name, " -> ".join(prepared.trace))
    return schema, prepared


# --- Core Actions ---

def run_train(run: RunConfig, config: dict, store: Optional[RunStore] = None) -> TrainReport:
    """load -> preprocess -> split -> train -> evaluate; writes report, checkpoint and training log."""
    if run.mode == "compare":
        raise ConfigError("run_train handles plain or encrypted mode; use run_compare for compare")
    schema, prepared = _load_and_prepare(run, config)
    effective = _effective_config(run, config, schema)
    digest = config_hash(effective)
    out_dir = Path(run.output_dir) / schema.name / run.mode
    progress = not config["project"].get("silent_mode", False)
    run_id = store.start_run(schema.name, run.mode, run.resolved_activation, run.profile, digest) if store else None

    try:
        train, test = prepared.train, prepared.test
        shape = WnnShape(nin=train.n_features)
        if run.mode == "plain":
            with stage("train"):
                params, report = train_plain(train, shape, run.training, run.resolved_activation, progress=progress)
            with stage("evaluate"):
                labels, scores = predict_labels(params, test.features, run.resolved_activation)
                metrics = evaluate(test.labels.astype(int).tolist(), labels, scores)
            save_checkpoint(out_dir / "checkpoint.yaml", params)
            seeds = {"train": run.training.seed, "split": config["data"]["seed"]}
        else:
            with stage("setup"):
                params = ckks_params_from_config(dict(config["ckks"], profile=run.profile))
                roles = ppwnn.RoleSplit.create(params, seed=run.key_seed)
                encrypt_rng = np.random.default_rng(run.key_seed + 1)
                enc_train = ppwnn.encrypt_dataset(train, roles.custodian.public_keys, encrypt_rng)
                enc_test = ppwnn.encrypt_dataset(test, roles.custodian.public_keys, encrypt_rng)
            with stage("train"):
                enc, report = ppwnn.train_encrypted(
                    enc_train, shape, run.training, roles, progress=progress, name=schema.name
                )
            with stage("evaluate"):
                metrics = ppwnn.test_encrypted(enc, enc_test, roles, run.training.workers)
                clear_params, clear_momentum = roles.custodian.decrypt_params(enc)
                train_labels, _ = predict_labels(clear_params, train.features, "poly")
                report.train_accuracy = float(np.mean(np.asarray(train_labels) == train.labels.astype(int)))
            ppwnn.save_encrypted_checkpoint(enc, out_dir / "checkpoint", config_hash=digest)
            save_checkpoint(out_dir / "checkpoint.yaml", clear_params, clear_momentum)
            seeds = {"train": run.training.seed, "split": config["data"]["seed"], "keys": run.key_seed, "encrypt": run.key_seed + 1}
    except HEWNNError as exc:
        if store:
            store.fail_run(run_id, str(exc))
            store.add_execution_log("train", detail=f"{schema.name}/{run.mode}: {exc}", level="ERROR")
        raise

    report.dataset = schema.name
    report.test_accuracy = metrics.accuracy
    report.test_auc = metrics.auc
    report.config_hash = digest
    report.seeds = seeds
    report.effective_config = effective

    report_path = save_report(report, out_dir / "report.yaml")
    write_training_log(report, out_dir / "training_log.csv")
    if store:
        store.finish_run(run_id, report, str(report_path))
        store.add_execution_log(
            "train", detail=f"{schema.name}/{run.mode} acc={metrics.accuracy:.3f} epochs={report.epochs_run}"
        )
    logger.info(
        "%s %s: test accuracy %.3f, AUC %s, %.2f s/epoch",
        schema.name,
        run.mode,
        metrics.accuracy,
        "-" if metrics.auc is None else f"{metrics.auc:.3f}",
        report.mean_epoch_seconds or 0.0,
    )
    return report


def _compare_targets(run: RunConfig, config: dict) -> List[str]:
    if run.dataset != "all":
        return [run.dataset]
    registry = load_registry(Path(config["data"]["schema_dir"]))
    ordered = sorted(registry.values(), key=lambda s: (s.group != "health", s.name))
    return [schema.name for schema in ordered]


def run_compare(run: RunConfig, config: dict, store: Optional[RunStore] = None) -> List[ComparisonRow]:
    """Plain baseline first; its final training accuracy becomes the encrypted run's target accuracy."""
    rows = []
    for dataset in _compare_targets(run, config):
        plain_run = run.model_copy(update={"dataset": dataset, "mode": "plain"})
        plain = run_train(plain_run, config, store)

        training = run.training.model_copy(update={"target_accuracy": plain.train_accuracy})
        enc_run = run.model_copy(
            update={"dataset": dataset, "mode": "encrypted", "activation": "poly", "training": training}
        )
        encrypted = run_train(enc_run, config, store)

        with stage("load"):
            schema, _ = resolve_dataset(dataset, config)
        rows.append(
            ComparisonRow(
                dataset=schema.title or schema.name,
                group=schema.group,
                plain_accuracy=plain.test_accuracy,
                plain_auc=plain.test_auc,
                encrypted_accuracy=encrypted.test_accuracy,
                encrypted_auc=encrypted.test_auc,
                encrypted_epoch_seconds=encrypted.mean_epoch_seconds,
            )
        )
    paths = write_comparison(rows, Path(run.output_dir))
    print(render_comparison_table(rows))
    print(f"Comparison written to {paths['text']} and {paths['csv']}")
    return rows


def action_datasets(config: dict, fetch: bool = False, pin: bool = False):
    data_conf = config["data"]
    schema_dir = Path(data_conf["schema_dir"])
    raw_dir = Path(data_conf["raw_dir"])
    print(f"{'Dataset':<24}{'Group':<9}{'Expected':<16}{'File':<8}Checksum")
    for schema_path in sorted(schema_dir.glob("*.yaml")):
        schema = load_schema(schema_path)
        path = dataset_path(schema, raw_dir)
        if fetch and not path.exists():
            try:
                fetch_dataset(schema, raw_dir)
            except DataLoadError as exc:
                logger.warning("%s", exc)
        if pin and path.exists() and schema.sha256 is None:
            pin_checksum(schema_path, path)
            schema = load_schema(schema_path)
        expected = "-"
        if schema.expected:
            e = schema.expected
            expected = f"{e.samples} ({e.class_0}/{e.class_1})"
        present = path.exists()
        if not present:
            checksum = "-"
        else:
            verdict = verify_checksum(path, schema)
            checksum = {True: "ok", False: "MISMATCH", None: f"unrecorded {file_sha256(path)[:12]}"}[verdict]
        print(f"{schema.name:<24}{schema.group:<9}{expected:<16}{'yes' if present else 'no':<8}{checksum}")


def action_params(config: dict):
    params = ckks_params_from_config(config["ckks"])
    fits = params.max_depth >= ppwnn.TRAINING_DEPTH
    print("\n--- CKKS Parameters ---")
    print(f"profile: {params.profile}{'  (INSECURE, testing only)' if params.insecure else ''}")
    print(f"poly_degree: {params.poly_degree} ({params.poly_degree // 2} slots)")
    print(f"coeff_modulus_bits: {list(params.coeff_modulus_bits)} + special prime {params.special_prime_bits}")
    print(f"total modulus bits: {params.total_bits}")
    print(f"scale: 2^{params.scale_bits}")
    print(f"max depth: {params.max_depth}")
    print(
        f"training depth: forward {ppwnn.FORWARD_DEPTH}, gradients {ppwnn.GRADIENT_DEPTH}, "
        f"batch mean {ppwnn.BATCH_MEAN_DEPTH}, update {ppwnn.TRAINING_DEPTH} -> {'fits' if fits else 'DOES NOT FIT'}"
    )


def action_status(config: dict, export: Optional[int] = None):
    store = get_store(config)
    if export is not None:
        print(store.export_run(export))
        return

    print("\n--- Run Status ---")
    for row in store.summarize_runs():
        print(f"{row['mode']} {row['status']}: {row['count']}")

    print("\n--- Recent Runs ---")
    for row in store.list_runs(limit=10):
        acc = "-" if row["test_accuracy"] is None else f"{row['test_accuracy']:.3f}"
        print(f"#{row['run_id']} {row['dataset']} {row['mode']} {row['status']} acc={acc} {row['last_error'] or ''}")

    print("\n--- Recent Logs ---")
    for log in store.fetch_execution_logs(limit=10):
        print(f"[{log['created_at']}] {log['level']}: {log['event']} {log['detail'] or ''}")


def action_quality(config: dict):
    logger.info("Running quality checks...")
    report = run_quality_checks(config)
    print(render_quality_report(report))
    return report


# --- Main Dispatch ---

def _add_run_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--dataset", required=True, help="Dataset name, schema YAML or data file ('all' for compare)")
    parser.add_argument("--activation", choices=["exact", "poly"])
    parser.add_argument("--profile", choices=["secure", "test-insecure"])
    parser.add_argument("--eta", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--epsilon", type=float, dest="convergence_epsilon")
    parser.add_argument("--stop-rule", choices=["either", "both"])
    parser.add_argument("--target-accuracy", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--key-seed", type=int)
    parser.add_argument("--output-dir")


def _run_overrides(args) -> dict:
    training_keys = ("eta", "alpha", "batch_size", "max_epochs", "convergence_epsilon", "stop_rule", "target_accuracy", "seed", "workers")
    training = {k: getattr(args, k) for k in training_keys if getattr(args, k, None) is not None}
    return {
        "activation": args.activation,
        "profile": args.profile,
        "key_seed": args.key_seed,
        "output_dir": _expand_path(args.output_dir),
        "training": training,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="HEWNN: wavelet neural network training on CKKS-encrypted data")
    parser.add_argument("--config", default="config.yaml", help="Path to config file")
    parser.add_argument("--log-level", help="Override logging.level")
    parser.add_argument("--log-file", help="Override logging.file ('' disables the file handler)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a plain or encrypted model on one dataset")
    train.add_argument("--mode", choices=["plain", "encrypted"], default="plain")
    _add_run_arguments(train)

    compare = sub.add_parser("compare", help="Plain baseline then encrypted twin, with a comparison table")
    _add_run_arguments(compare)

    datasets = sub.add_parser("datasets", help="List dataset fixtures and checksums")
    datasets.add_argument("--fetch", action="store_true", help="Download missing fixtures")
    datasets.add_argument("--pin", action="store_true", help="Record the sha256 of present fixtures that have none")

    sub.add_parser("params", help="Print the resolved CKKS profile and depth budget")
    status = sub.add_parser("status", help="Summarize the run ledger")
    status.add_argument("--export", type=int, metavar="RUN_ID", help="Print one run and its batch log as JSON")
    sub.add_parser("check", help="Run the quality self-check")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = validate_config(apply_logging_overrides(load_config(args.config), args))
    except ValueError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    configure_logging(config)

    command = args.command
    started = time.perf_counter()
    try:
        if command == "train":
            store = get_store(config)
            run = build_run_config(config, args.dataset, args.mode, _run_overrides(args))
            report = run_train(run, config, store)
            print(f"{report.dataset} {run.mode}: accuracy={report.test_accuracy:.3f} auc={report.test_auc}")
        elif command == "compare":
            store = get_store(config)
            run = build_run_config(config, args.dataset, "compare", _run_overrides(args))
            run_compare(run, config, store)
        elif command == "datasets":
            action_datasets(config, fetch=args.fetch, pin=args.pin)
        elif command == "params":
            action_params(config)
        elif command == "status":
            try:
                action_status(config, export=args.export)
            except KeyError as exc:
                print(exc.args[0], file=sys.stderr)
                return 1
        elif command == "check":
            report = action_quality(config)
            if not report.perfect:
                return 1
    except ConfigError as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 2
    except HEWNNError as exc:
        logger.error("%s", exc)
        print(str(exc), file=sys.stderr)
        return 1
    logger.debug("%s finished in %.1f s", command, time.perf_counter() - started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
