"""
SQLite run store using SQLAlchemy

File-backed databases use WAL mode; ``database_path=None`` gives an
in-memory database shared by all sessions of the store.
"""

import json
import logging
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional

from sqlalchemy import create_engine, text as sql_text
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, sessionmaker
from sqlalchemy.pool import StaticPool

from .adapter import RunStore
from .models import Base, HistoryRow, Metric, Run

logger = logging.getLogger(__name__)

VALID_STATUSES = ("ok", "failed")


class SQLiteRunStore(RunStore):
    """SQLite run registry using SQLAlchemy"""

    def __init__(self, database_path: Optional[str], timeout: float = 60.0):
        """
        Initialize SQLite run store.

        Args:
            database_path: Path to SQLite database file, or None for in-memory
            timeout: Database timeout in seconds
        """
        if database_path is None:
            self.engine: Engine = create_engine(
                "sqlite://",
                connect_args={"check_same_thread": False},
                poolclass=StaticPool,
                echo=False,
            )
        else:
            self.engine = create_engine(
                f"sqlite:///{database_path}",
                connect_args={
                    "timeout": timeout,
                    "check_same_thread": False,
                },
                echo=False,
                pool_pre_ping=True
            )
            self._enable_wal_mode()

        self.SessionLocal = sessionmaker(bind=self.engine, autoflush=False, autocommit=False)
        self.database_path = database_path
        logger.debug(f"SQLite run store initialized with database: {database_path or ':memory:'}")

    def _enable_wal_mode(self) -> None:
        """Enable Write-Ahead Logging mode for concurrent readers"""
        with self.engine.connect() as conn:
            conn.execute(sql_text("PRAGMA journal_mode=WAL"))
            conn.execute(sql_text("PRAGMA synchronous=NORMAL"))
            conn.commit()

    def initialize_schema(self) -> None:
        """Create database tables if they don't exist"""
        Base.metadata.create_all(bind=self.engine)

    def close(self) -> None:
        """Close database connection"""
        self.engine.dispose()

    def _get_session(self) -> Session:
        """Get a new database session"""
        return self.SessionLocal()

    def start_run(self, command: str, config: Optional[Dict[str, Any]] = None,
                  preset: Optional[str] = None) -> int:
        """Insert a run row in status 'running'"""
        system = config.get("system", {}) if config else {}
        with self._get_session() as session:
            try:
                run = Run(
                    command=command,
                    preset=preset,
                    system=system.get("name"),
                    seed=system.get("seed"),
                    config_json=json.dumps(config, sort_keys=True) if config is not None else None,
                    status="running",
                    started_at=datetime.now(timezone.utc),
                )
                session.add(run)
                session.commit()
                logger.debug(f"Started run {run.id} ({command})")
                return run.id
            except Exception as e:
                session.rollback()
                logger.error(f"Error starting run for {command}: {e}")
                raise

    def finish_run(self, run_id: int, status: str, message: Optional[str] = None,
                   final_loss: Optional[float] = None,
                   artifacts: Optional[Dict[str, str]] = None) -> None:
        """Set status, message, final loss and artifact paths"""
        if status not in VALID_STATUSES:
            raise ValueError(f"Invalid run status: {status}. Valid options are: {', '.join(VALID_STATUSES)}")
        with self._get_session() as session:
            try:
                run = session.get(Run, run_id)
                if run is None:
                    raise KeyError(f"Run {run_id} not found")
                run.status = status
                run.message = message
                run.final_loss = final_loss
                run.artifacts_json = json.dumps(artifacts, sort_keys=True) if artifacts else None
                run.finished_at = datetime.now(timezone.utc)
                session.commit()
            except Exception as e:
                session.rollback()
                logger.error(f"Error finishing run {run_id}: {e}")
                raise

    def add_history(self, run_id: int, entries: Iterable[Any]) -> int:
        """Insert history rows in one transaction"""
        rows = [
            HistoryRow(run_id=run_id, iteration=entry.iteration, loss=float(entry.loss),
                       grad_norm=float(entry.grad_norm), wall_ms=float(entry.wall_ms))
            for entry in entries
        ]
        with self._get_session() as session:
            try:
                session.add_all(rows)
                session.commit()
            except Exception as e:
                session.rollback()
                logger.error(f"Error storing history for run {run_id}: {e}")
                raise
        return len(rows)

    def add_metrics(self, run_id: int, metrics: Dict[str, float]) -> None:
        """Insert or replace metric values"""
        with self._get_session() as session:
            try:
                existing = {m.name: m for m in session.query(Metric).filter_by(run_id=run_id)}
                for name, value in metrics.items():
                    if name in existing:
                        existing[name].value = float(value)
                    else:
                        session.add(Metric(run_id=run_id, name=name, value=float(value)))
                session.commit()
            except Exception as e:
                session.rollback()
                logger.error(f"Error storing metrics for run {run_id}: {e}")
                raise

    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        with self._get_session() as session:
            run = session.get(Run, run_id)
            return self._run_to_dict(run) if run else None

    def list_runs(self, command: Optional[str] = None, limit: int = 50) -> List[Dict[str, Any]]:
        with self._get_session() as session:
            query = session.query(Run)
            if command:
                query = query.filter(Run.command == command)
            runs = query.order_by(Run.id.desc()).limit(limit).all()
            return [self._run_to_dict(run) for run in runs]

    def get_history(self, run_id: int) -> List[Dict[str, Any]]:
        with self._get_session() as session:
            rows = (session.query(HistoryRow)
                    .filter_by(run_id=run_id)
                    .order_by(HistoryRow.iteration)
                    .all())
            return [
                {"iteration": r.iteration, "loss": r.loss, "grad_norm": r.grad_norm, "wall_ms": r.wall_ms}
                for r in rows
            ]

    def get_metrics(self, run_id: int) -> Dict[str, float]:
        with self._get_session() as session:
            return {m.name: m.value for m in session.query(Metric).filter_by(run_id=run_id)}

    @staticmethod
    def _run_to_dict(run: Run) -> Dict[str, Any]:
        return {
            "id": run.id,
            "command": run.command,
            "preset": run.preset,
            "system": run.system,
            "seed": run.seed,
            "config": json.loads(run.config_json) if run.config_json else None,
            "status": run.status,
            "message": run.message,
            "final_loss": run.final_loss,
            "artifacts": json.loads(run.artifacts_json) if run.artifacts_json else {},
            "started_at": run.started_at,
            "finished_at": run.finished_at,
        }
