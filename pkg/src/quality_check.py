import logging
import math
import os
import shutil
import tempfile
from copy import deepcopy
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from modules import ckks
from modules.ckks import CkksContext, CkksParams
from modules.errors import DepthBudgetError, FormatError, HEWNNError, RelinearizationRequiredError
from modules.run_store import RunStore
from modules.serialization import deserialize, serialize
from modules.wnn import TrainConfig

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

# Small ring so the whole report runs in a few seconds; chain [60, 40, 40, 60].
CHECK_PARAMS = CkksParams.test_insecure(depth=3, poly_degree=64)
CHECK_SEED = 2024


@dataclass
class QualityMetric:
    name: str
    score: int
    max_score: int = 10
    details: str = ""
    recommendation: str = ""


@dataclass
class QualityReport:
    metrics: List[QualityMetric]

    @property
    def average_score(self) -> float:
        if not self.metrics:
            return 0.0
        return round(sum(m.score for m in self.metrics) / len(self.metrics), 2)

    @property
    def perfect(self) -> bool:
        return all(m.score == m.max_score for m in self.metrics)


REQUIRED_SCHEMA_COLUMNS = {
    "runs": {"project_name", "dataset", "mode", "status", "config_hash", "test_accuracy", "stop_reason"},
    "batch_logs": {"run_id", "epoch", "batch", "mse", "elapsed_ms"},
    "execution_logs": {"project_name", "level", "event", "detail"},
}


@dataclass
class _Fixture:
    context: CkksContext
    keys: ckks.KeySet
    rng: np.random.Generator

    def encrypt(self, values) -> ckks.CkksCiphertext:
        return ckks.encrypt(ckks.encode(values, self.context), self.keys.public_key, self.rng)

    def decrypt(self, ct: ckks.CkksCiphertext) -> List[float]:
        return ckks.decode(ckks.decrypt(ct, self.keys.secret_key))


def _make_fixture() -> _Fixture:
    context = CkksContext(CHECK_PARAMS)
    rng = np.random.default_rng(CHECK_SEED)
    return _Fixture(context=context, keys=ckks.keygen(context, rng), rng=rng)


def _make_sandbox_config(config: dict) -> tuple[dict, str]:
    sandbox_dir = tempfile.mkdtemp(prefix="hewnn_quality_")
    cloned = deepcopy(config)
    cloned.setdefault("project", {})
    cloned["project"]["db_file"] = os.path.join(sandbox_dir, "quality.sqlite")
    cloned["project"]["output_dir"] = os.path.join(sandbox_dir, "output")
    return cloned, sandbox_dir


def _check_config(config: dict, fixture: _Fixture) -> QualityMetric:
    required_sections = {"project", "logging", "ckks", "training", "data"}
    missing_sections = [section for section in required_sections if section not in config]
    if missing_sections:
        return QualityMetric(
            name="Configuration completeness",
            score=0,
            details=f"Missing sections: {', '.join(sorted(missing_sections))}",
            recommendation="Run validate_config on the loaded config.yaml before the checks",
        )

    missing_project = [key for key in ("name", "db_file", "output_dir") if not config["project"].get(key)]
    if missing_project:
        return QualityMetric(
            name="Configuration completeness",
            score=5,
            details=f"Missing project fields: {', '.join(sorted(missing_project))}",
            recommendation="Fill in required project fields",
        )

    try:
        TrainConfig(**config["training"])
    except ValueError as exc:
        return QualityMetric(
            name="Configuration completeness",
            score=6,
            details=f"training section invalid: {exc}",
            recommendation="Check eta > 0, 0 <= alpha < 1 and batch_size >= 1",
        )

    return QualityMetric(
        name="Configuration completeness",
        score=10,
        details="All sections present and the training section validates",
    )


def _check_roundtrip(config: dict, fixture: _Fixture) -> QualityMetric:
    values = [1.5, -2.25, 3.0, 99.0, -0.001]
    decoded = fixture.decrypt(fixture.encrypt(values))
    error = max(abs(d - v) for d, v in zip(decoded, values))
    bound = 2**-20 * max(abs(v) for v in values) + 2**-30
    if error > bound:
        return QualityMetric(
            name="CKKS roundtrip precision",
            score=4,
            details=f"max error {error:.3e} exceeds {bound:.3e}",
            recommendation="Check the encoder scaling and the gaussian sampler",
        )
    return QualityMetric(
        name="CKKS roundtrip precision",
        score=10,
        details=f"encode/encrypt/decrypt/decode max error {error:.3e}",
    )


def _check_homomorphism(config: dict, fixture: _Fixture) -> QualityMetric:
    u, v = [1.5, -3.0, 7.25], [2.25, 4.0, -0.5]
    cu, cv = fixture.encrypt(u), fixture.encrypt(v)
    add_error = max(abs(r - (a + b)) for r, a, b in zip(fixture.decrypt(ckks.eval_add(cu, cv)), u, v))
    product = ckks.eval_mul(cu, cv, fixture.keys.relin_key)
    mul_error = max(abs(r - a * b) for r, a, b in zip(fixture.decrypt(product), u, v))
    if add_error > 1e-4 or mul_error > 1e-3:
        return QualityMetric(
            name="Homomorphic add/mul",
            score=5,
            details=f"add error {add_error:.3e}, mul error {mul_error:.3e}",
            recommendation="Inspect relinearization and rescale",
        )
    return QualityMetric(
        name="Homomorphic add/mul",
        score=10,
        details=f"add error {add_error:.3e}, mul error {mul_error:.3e}",
    )


def _check_depth_law(config: dict, fixture: _Fixture) -> QualityMetric:
    budget = CHECK_PARAMS.max_depth
    ct = fixture.encrypt([1.1])
    done = 0
    try:
        for _ in range(budget + 1):
            ct = ckks.eval_mul(ct, ct, fixture.keys.relin_key)
            done += 1
    except DepthBudgetError:
        pass

    expected = 1.1 ** (2**budget)
    value = fixture.decrypt(ct)[0] if done == budget else math.nan
    if done != budget or not math.isclose(value, expected, rel_tol=1e-3):
        return QualityMetric(
            name="Depth law",
            score=3,
            details=f"{done} multiplications succeeded with a chain of {budget + 1} primes",
            recommendation="Every eval_mul must drop exactly one prime",
        )
    return QualityMetric(
        name="Depth law",
        score=10,
        details=f"exactly {budget} sequential multiplications fit a chain of {budget + 1} primes",
    )


def _check_size_discipline(config: dict, fixture: _Fixture) -> QualityMetric:
    ct = fixture.encrypt([2.0])
    product = ckks.eval_mul(ct, ct, fixture.keys.relin_key)
    a0, a1 = ct.components
    tensor = ckks.CkksCiphertext(ct.context, (a0, a1, a1), ct.scale, ct.length)
    try:
        ckks.decrypt(tensor, fixture.keys.secret_key)
        rejected = False
    except RelinearizationRequiredError:
        rejected = True

    if product.size != 2 or not rejected:
        return QualityMetric(
            name="Relinearization size discipline",
            score=4,
            details=f"product size {product.size}, size-3 decrypt rejected={rejected}",
            recommendation="eval_mul must relinearize before returning",
        )
    return QualityMetric(
        name="Relinearization size discipline",
        score=10,
        details="products come back with 2 components; size-3 ciphertexts cannot be decrypted",
    )


def _check_serialization(config: dict, fixture: _Fixture) -> QualityMetric:
    ct = fixture.encrypt([0.5, -0.25])
    blob = serialize(ct)
    restored = deserialize(blob, fixture.context)
    same = all(
        x.basis == y.basis and np.array_equal(x.residues, y.residues)
        for x, y in zip(ct.components, restored.components)
    )
    corrupted = bytearray(blob)
    corrupted[len(blob) // 2] ^= 0x01
    try:
        deserialize(bytes(corrupted), fixture.context)
        detected = False
    except FormatError:
        detected = True

    if not same or not detected:
        return QualityMetric(
            name="Serialization integrity",
            score=5,
            details=f"roundtrip exact={same}, corruption detected={detected}",
            recommendation="Check the payload layout and the checksum trailer",
        )
    return QualityMetric(
        name="Serialization integrity",
        score=10,
        details="ciphertexts roundtrip bit-exactly and a flipped byte is rejected",
    )


def _check_db_schema(config: dict, fixture: _Fixture) -> QualityMetric:
    store = RunStore(config["project"]["db_file"], project_name=config["project"].get("name"))
    store.init_db()

    missing_by_table: dict[str, List[str]] = {}
    with store.get_cursor() as cur:
        for table, required_cols in REQUIRED_SCHEMA_COLUMNS.items():
            cur.execute(f"PRAGMA table_info({table})")
            existing = {row[1] for row in cur.fetchall()}
            missing_cols = sorted(required_cols - existing)
            if missing_cols:
                missing_by_table[table] = missing_cols

    if missing_by_table:
        details = "; ".join(f"{tbl}: {', '.join(cols)}" for tbl, cols in missing_by_table.items())
        return QualityMetric(
            name="Run ledger schema",
            score=7,
            details=f"Missing columns -> {details}",
            recommendation="Re-run initialization to align the ledger schema",
        )

    return QualityMetric(
        name="Run ledger schema",
        score=10,
        details="runs, batch_logs and execution_logs carry the required columns",
    )


CHECKS: List[Callable[[dict, _Fixture], QualityMetric]] = [
    _check_config,
    _check_roundtrip,
    _check_homomorphism,
    _check_depth_law,
    _check_size_discipline,
    _check_serialization,
    _check_db_schema,
]


def run_quality_checks(config: dict) -> QualityReport:
    """Execute a suite of quality checks and return a scored report."""

    sandbox_config, sandbox_dir = _make_sandbox_config(config)
    fixture = _make_fixture()
    metrics: List[QualityMetric] = []
    try:
        for check in CHECKS:
            try:
                metric = check(sandbox_config, fixture)
            except HEWNNError as exc:
                logger.warning("Quality check %s raised: %s", check.__name__, exc)
                metric = QualityMetric(name=check.__name__.lstrip("_"), score=0, details=str(exc))
            metrics.append(metric)
    finally:
        shutil.rmtree(sandbox_dir, ignore_errors=True)

    return QualityReport(metrics=metrics)


def render_quality_report(report: QualityReport) -> str:
    lines = ["\n=== Quality Report ==="]
    for metric in report.metrics:
        lines.append(f"- {metric.name}: {metric.score}/{metric.max_score}")
        if metric.details:
            lines.append(f"  Details: {metric.details}")
        if metric.recommendation and metric.score < metric.max_score:
            lines.append(f"  Recommendation: {metric.recommendation}")
    lines.append(f"Overall: {report.average_score}/10 (perfect={report.perfect})")
    return "\n".join(lines)
