import json
import sqlite3

import pytest

from modules.reporting import BatchLogEntry, TrainReport
from modules.run_store import RunStore


@pytest.fixture
def store(tmp_path):
    db = RunStore(str(tmp_path / "runs.db"), project_name="demo")
    db.init_db()
    return db


def _report():
    return TrainReport(
        mode="plain",
        activation="exact",
        epoch_seconds=[2.0, 4.0],
        batch_log=[
            BatchLogEntry(epoch=0, batch=1, mse=0.2, elapsed_ms=5.0),
            BatchLogEntry(epoch=0, batch=0, mse=0.3, elapsed_ms=6.0),
        ],
        epochs_run=2,
        stop_reason="converged",
        test_accuracy=0.75,
        test_auc=0.8,
    )


def test_init_db_creates_tables(store):
    with store.get_cursor() as cur:
        cur.execute(
            "SELECT name FROM sqlite_master WHERE type='table' AND name IN ('runs', 'batch_logs', 'execution_logs')"
        )
        tables = {row[0] for row in cur.fetchall()}

    assert tables == {"runs", "batch_logs", "execution_logs"}


def test_init_db_is_idempotent(store):
    store.init_db()

    assert store.list_runs() == []


def test_get_cursor_rolls_back_on_error(store):
    with pytest.raises(sqlite3.Error):
        with store.get_cursor(commit=True) as cur:
            cur.execute("INSERT INTO runs(project_name, dataset, mode, status) VALUES ('demo', 'haberman', 'plain', 'RUNNING')")
            cur.execute("INSERT INTO missing_table VALUES (2)")

    # Transaction should have been rolled back, so no rows are persisted
    with store.get_cursor() as cur:
        cur.execute("SELECT COUNT(*) FROM runs")
        assert cur.fetchone()[0] == 0


def test_run_lifecycle(store):
    run_id = store.start_run("haberman", "plain", "exact", "test-insecure", "abc")
    assert store.list_runs()[0]["status"] == "RUNNING"

    store.finish_run(run_id, _report(), report_path="output/haberman/plain/report.yaml")

    row = store.list_runs(dataset="haberman")[0]
    assert row["status"] == "DONE"
    assert row["test_accuracy"] == pytest.approx(0.75)
    assert row["mean_epoch_seconds"] == pytest.approx(3.0)
    assert row["stop_reason"] == "converged"
    assert [(e.epoch, e.batch) for e in store.fetch_batch_logs(run_id)] == [(0, 0), (0, 1)]


def test_fail_run_records_error(store):
    run_id = store.start_run("banknote", "encrypted", "poly", "test-insecure", "def")

    store.fail_run(run_id, "[train] depth exhausted")

    row = store.list_runs()[0]
    assert row["status"] == "FAILED"
    assert row["last_error"] == "[train] depth exhausted"


def test_runs_are_scoped_by_project(tmp_path):
    path = str(tmp_path / "shared.db")
    first = RunStore(path, project_name="one")
    second = RunStore(path, project_name="two")
    first.init_db()

    first.start_run("haberman", "plain", "exact", None, "x")

    assert len(first.list_runs()) == 1
    assert second.list_runs() == []


def test_summarize_runs_groups_by_mode_and_status(store):
    store.start_run("haberman", "plain", "exact", None, "a")
    done = store.start_run("diabetes", "plain", "exact", None, "b")
    store.finish_run(done, _report())
    failed = store.start_run("diabetes", "encrypted", "poly", "test-insecure", "c")
    store.fail_run(failed, "boom")

    summary = {(row["mode"], row["status"]): row["count"] for row in store.summarize_runs()}

    assert summary == {("encrypted", "FAILED"): 1, ("plain", "DONE"): 1, ("plain", "RUNNING"): 1}


def test_execution_logs_filter_by_level(store):
    store.add_execution_log("loaded")
    store.add_execution_log("trained")
    store.add_execution_log("depth exhausted", detail="stage=gradients", level="error")

    errors = store.fetch_execution_logs(level="ERROR")

    assert [row["event"] for row in errors] == ["depth exhausted"]
    assert len(store.fetch_execution_logs()) == 3


def test_export_run(store):
    run_id = store.start_run("fertility", "plain", "exact", None, "h")
    store.finish_run(run_id, _report())

    payload = json.loads(store.export_run(run_id))

    assert payload["dataset"] == "fertility"
    assert len(payload["batch_logs"]) == 2
    with pytest.raises(KeyError, match="not found"):
        store.export_run(run_id + 100)
