import json
import logging
import sqlite3
from contextlib import contextmanager
from typing import List, Optional

from .reporting import BatchLogEntry, TrainReport

logger = logging.getLogger(__name__)
logger.addHandler(logging.NullHandler())


class RunStore:
    """SQLite ledger of training runs, per-batch log lines and execution events."""

    def __init__(self, db_path: str, project_name: str | None = None):
        self.db_path = db_path
        self.project_name = project_name or "default"

    def get_connection(self):
        try:
            conn = sqlite3.connect(self.db_path, check_same_thread=False)
            conn.row_factory = sqlite3.Row
            return conn
        except sqlite3.Error as e:
            logger.error(f"DB Connection failed: {e}")
            raise

    @contextmanager
    def get_cursor(self, commit: bool = False):
        conn = self.get_connection()
        cursor = conn.cursor()
        try:
            yield cursor
            if commit:
                conn.commit()
        except Exception as e:
            conn.rollback()
            logger.error(f"DB Operation failed: {e}")
            raise
        finally:
            cursor.close()
            conn.close()

    def init_db(self):
        """Initialize tables and indexes for runs, batch logs and execution logs."""
        runs_ddl = """
        CREATE TABLE IF NOT EXISTS runs (
            run_id INTEGER PRIMARY KEY AUTOINCREMENT,
            project_name TEXT NOT NULL,
            dataset TEXT NOT NULL,
            mode TEXT NOT NULL,
            activation TEXT,
            profile TEXT,
            status TEXT NOT NULL,
            config_hash TEXT,
            test_accuracy REAL,
            test_auc REAL,
            mean_epoch_seconds REAL,
            epochs_run INTEGER DEFAULT 0,
            stop_reason TEXT,
            report_path TEXT,
            last_error TEXT,
            started_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
            updated_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        );
        """

        batch_logs_ddl = """
        CREATE TABLE IF NOT EXISTS batch_logs (
            run_id INTEGER NOT NULL,
            epoch INTEGER NOT NULL,
            batch INTEGER NOT NULL,
            mse REAL NOT NULL,
            elapsed_ms REAL,
            UNIQUE(run_id, epoch, batch)
        );
        """

        execution_logs_ddl = """
        CREATE TABLE IF NOT EXISTS execution_logs (
            log_id INTEGER PRIMARY KEY AUTOINCREMENT,
            project_name TEXT NOT NULL,
            level TEXT NOT NULL,
            event TEXT NOT NULL,
            detail TEXT,
            created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
        );
        """

        idx_runs_project = """
            CREATE INDEX IF NOT EXISTS idx_runs_project
            ON runs(project_name, dataset, status)
        """
        idx_batch_run = "CREATE INDEX IF NOT EXISTS idx_batch_run ON batch_logs(run_id);"

        try:
            with self.get_cursor(commit=True) as cursor:
                cursor.execute(runs_ddl)
                cursor.execute(batch_logs_ddl)
                cursor.execute(execution_logs_ddl)
                cursor.execute(idx_runs_project)
                cursor.execute(idx_batch_run)

            logger.info(f"Run ledger initialized at {self.db_path}")
        except Exception as e:
            logger.error(f"Failed to initialize run ledger: {e}")
            raise

    # --- Run helpers ----------------------------------------------------------

    def start_run(self, dataset: str, mode: str, activation: str, profile: Optional[str], config_hash: str) -> int:
        with self.get_cursor(commit=True) as cur:
            cur.execute(
                """
                INSERT INTO runs (project_name, dataset, mode, activation, profile, status, config_hash)
                VALUES (?, ?, ?, ?, ?, 'RUNNING', ?)
                """,
                (self.project_name, dataset, mode, activation, profile, config_hash),
            )
            return int(cur.lastrowid)

    def finish_run(self, run_id: int, report: TrainReport, report_path: Optional[str] = None) -> None:
        with self.get_cursor(commit=True) as cur:
            cur.execute(
                """
                UPDATE runs
                SET status = 'DONE', test_accuracy = ?, test_auc = ?, mean_epoch_seconds = ?,
                    epochs_run = ?, stop_reason = ?, report_path = ?, updated_at = CURRENT_TIMESTAMP
                WHERE run_id = ? AND project_name = ?
                """,
                (
                    report.test_accuracy,
                    report.test_auc,
                    report.mean_epoch_seconds,
                    report.epochs_run,
                    report.stop_reason,
                    report_path,
                    run_id,
                    self.project_name,
                ),
            )
            cur.executemany(
                "INSERT OR REPLACE INTO batch_logs (run_id, epoch, batch, mse, elapsed_ms) VALUES (?, ?, ?, ?, ?)",
                [(run_id, e.epoch, e.batch, e.mse, e.elapsed_ms) for e in report.batch_log],
            )

    def fail_run(self, run_id: int, error: str) -> None:
        with self.get_cursor(commit=True) as cur:
            cur.execute(
                """
                UPDATE runs SET status = 'FAILED', last_error = ?, updated_at = CURRENT_TIMESTAMP
                WHERE run_id = ? AND project_name = ?
                """,
                (error, run_id, self.project_name),
            )

    def list_runs(self, limit: int = 20, dataset: Optional[str] = None) -> List[sqlite3.Row]:
        base_sql = [
            "SELECT run_id, dataset, mode, activation, profile, status, test_accuracy, test_auc,",
            "       mean_epoch_seconds, epochs_run, stop_reason, last_error, started_at",
            "FROM runs",
            "WHERE project_name = ?",
        ]
        params: List = [self.project_name]
        if dataset:
            base_sql.append("AND dataset = ?")
            params.append(dataset)
        base_sql.append("ORDER BY run_id DESC LIMIT ?")
        params.append(limit)
        with self.get_cursor() as cur:
            cur.execute("\n".join(base_sql), params)
            return cur.fetchall()

    def fetch_batch_logs(self, run_id: int) -> List[BatchLogEntry]:
        with self.get_cursor() as cur:
            cur.execute(
                "SELECT epoch, batch, mse, elapsed_ms FROM batch_logs WHERE run_id = ? ORDER BY epoch, batch",
                (run_id,),
            )
            return [BatchLogEntry(**dict(row)) for row in cur.fetchall()]

    def summarize_runs(self) -> List[sqlite3.Row]:
        with self.get_cursor() as cur:
            cur.execute(
                """
                SELECT mode, status, COUNT(*) as count
                FROM runs
                WHERE project_name = ?
                GROUP BY mode, status
                ORDER BY mode, status
                """,
                (self.project_name,),
            )
            return cur.fetchall()

    # --- Execution log helpers ----------------------------------------------

    def add_execution_log(self, event: str, detail: Optional[str] = None, level: str = "INFO") -> None:
        with self.get_cursor(commit=True) as cur:
            cur.execute(
                """
                INSERT INTO execution_logs (project_name, level, event, detail)
                VALUES (?, ?, ?, ?)
                """,
                (self.project_name, level.upper(), event, detail),
            )

    def fetch_execution_logs(self, limit: int = 200, level: Optional[str] = None) -> List[sqlite3.Row]:
        base_sql = [
            "SELECT project_name, level, event, detail, created_at",
            "FROM execution_logs",
            "WHERE project_name = ?",
        ]
        params: List = [self.project_name]
        if level:
            base_sql.append("AND level = ?")
            params.append(level.upper())
        base_sql.append("ORDER BY log_id DESC LIMIT ?")
        params.append(limit)
        with self.get_cursor() as cur:
            cur.execute("\n".join(base_sql), params)
            return cur.fetchall()

    def export_run(self, run_id: int) -> str:
        """JSON dump of a run row and its batch log."""
        with self.get_cursor() as cur:
            cur.execute("SELECT * FROM runs WHERE run_id = ? AND project_name = ?", (run_id, self.project_name))
            row = cur.fetchone()
        if row is None:
            raise KeyError(f"Run {run_id} not found for project {self.project_name}")
        payload = dict(row)
        payload["batch_logs"] = [entry.model_dump() for entry in self.fetch_batch_logs(run_id)]
        return json.dumps(payload, default=str, indent=2)
