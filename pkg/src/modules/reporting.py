"""Run reports, training logs and the plain-vs-encrypted comparison table."""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd
import yaml
from pydantic import BaseModel, Field

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())

ACCURACY_GAP_FLAG = 0.1


class BatchLogEntry(BaseModel):
    epoch: int
    batch: int
    mse: float
    elapsed_ms: float


class TrainReport(BaseModel):
    mode: str
    activation: str
    dataset: str = ""
    loss_trace: List[float] = Field(default_factory=list)
    epoch_seconds: List[float] = Field(default_factory=list)
    batch_log: List[BatchLogEntry] = Field(default_factory=list)
    epochs_run: int = 0
    batches_run: int = 0
    stop_reason: str = ""
    max_depth_consumed: Optional[int] = None
    train_accuracy: Optional[float] = None
    test_accuracy: Optional[float] = None
    test_auc: Optional[float] = None
    config_hash: str = ""
    seeds: Dict[str, int] = Field(default_factory=dict)
    effective_config: Dict[str, Any] = Field(default_factory=dict)

    @property
    def mean_epoch_seconds(self) -> Optional[float]:
        if not self.epoch_seconds:
            return None
        return sum(self.epoch_seconds) / len(self.epoch_seconds)

    def without_timing(self) -> Dict[str, Any]:
        """Report fields that must be identical across reruns with the same seeds."""
        data = self.model_dump()
        data.pop("epoch_seconds")
        data["batch_log"] = [{k: v for k, v in entry.items() if k != "elapsed_ms"} for entry in data["batch_log"]]
        return data


def config_hash(config: Dict[str, Any]) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_report(report: TrainReport, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        yaml.safe_dump(report.model_dump(mode="json"), handle, sort_keys=False)
    return path


def load_report(path: Path) -> TrainReport:
    with open(path, "r", encoding="utf-8") as handle:
        return TrainReport(**yaml.safe_load(handle))


def write_training_log(report: TrainReport, path: Path) -> Path:
    """CSV with one line per batch: epoch, batch, mse, elapsed_ms."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [entry.model_dump() for entry in report.batch_log],
        columns=["epoch", "batch", "mse", "elapsed_ms"],
    )
    frame.to_csv(path, index=False)
    return path


class ComparisonRow(BaseModel):
    dataset: str
    group: str
    plain_accuracy: Optional[float]
    plain_auc: Optional[float]
    encrypted_accuracy: Optional[float]
    encrypted_auc: Optional[float]
    encrypted_epoch_seconds: Optional[float]

    @property
    def accuracy_gap(self) -> Optional[float]:
        if self.plain_accuracy is None or self.encrypted_accuracy is None:
            return None
        return abs(self.encrypted_accuracy - self.plain_accuracy)

    @property
    def flagged(self) -> bool:
        gap = self.accuracy_gap
        return gap is not None and gap > ACCURACY_GAP_FLAG


def comparison_frame(rows: Sequence[ComparisonRow]) -> pd.DataFrame:
    records = []
    for row in rows:
        record = row.model_dump()
        record["accuracy_gap"] = row.accuracy_gap
        record["flagged"] = row.flagged
        records.append(record)
    return pd.DataFrame(records)


def _fmt(value: Optional[float], digits: int = 2) -> str:
    return "-" if value is None else f"{value:.{digits}f}"


def _fmt_seconds(value: Optional[float]) -> str:
    if value is None:
        return "-"
    minutes, seconds = divmod(value, 60)
    return f"{int(minutes)} min {seconds:.1f} s" if minutes else f"{seconds:.2f} s"


def render_comparison_table(rows: Sequence[ComparisonRow]) -> str:
    header = ["Dataset", "Plain Acc", "Plain AUC", "Enc Acc", "Enc AUC", "Enc time/epoch", "Gap"]
    groups: Dict[str, List[ComparisonRow]] = {}
    for row in rows:
        groups.setdefault(row.group, []).append(row)

    body = []
    for group, members in groups.items():
        body.append([f"[{group}]"] + [""] * (len(header) - 1))
        for row in members:
            gap = _fmt(row.accuracy_gap)
            body.append(
                [
                    row.dataset,
                    _fmt(row.plain_accuracy),
                    _fmt(row.plain_auc),
                    _fmt(row.encrypted_accuracy),
                    _fmt(row.encrypted_auc),
                    _fmt_seconds(row.encrypted_epoch_seconds),
                    f"{gap} !" if row.flagged else gap,
                ]
            )
    widths = [max(len(str(line[i])) for line in [header] + body) for i in range(len(header))]
    lines = ["  ".join(str(cell).ljust(width) for cell, width in zip(header, widths))]
    lines.append("  ".join("-" * width for width in widths))
    for line in body:
        lines.append("  ".join(str(cell).ljust(width) for cell, width in zip(line, widths)).rstrip())
    return "\n".join(lines)


def write_comparison(rows: Sequence[ComparisonRow], output_dir: Path, stem: str = "comparison") -> Dict[str, Path]:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    text_path = output_dir / f"{stem}.txt"
    csv_path = output_dir / f"{stem}.csv"
    text_path.write_text(render_comparison_table(rows) + "\n", encoding="utf-8")
    comparison_frame(rows).to_csv(csv_path, index=False)
    logger.info("Comparison table written to %s and %s", text_path, csv_path)
    return {"text": text_path, "csv": csv_path}
