"""
SQLAlchemy ORM models for the run registry

One row per CLI command invocation in ``runs``, the training history of
that run in ``history`` and named diagnostic values in ``metrics``.
"""

from sqlalchemy import (
    Column, DateTime, Float, ForeignKey, Index, Integer, String, Text, text as sql_text
)
from sqlalchemy.orm import declarative_base, relationship

Base = declarative_base()


class Run(Base):
    """A single command invocation"""
    __tablename__ = "runs"
    __table_args__ = (
        Index('idx_run_command', 'command'),
        Index('idx_run_preset', 'preset'),
    )

    id = Column(Integer, primary_key=True, autoincrement=True)
    command = Column(String(20), nullable=False)  # generate, train, eval, check, scale
    preset = Column(String(50))
    system = Column(String(50))
    seed = Column(Integer)
    config_json = Column(Text)
    status = Column(String(20), nullable=False, default="running")  # running, ok, failed
    message = Column(Text)
    final_loss = Column(Float)
    artifacts_json = Column(Text)  # {"dataset": "...", "checkpoint": "..."}
    started_at = Column(DateTime, server_default=sql_text("CURRENT_TIMESTAMP"))
    finished_at = Column(DateTime)

    history = relationship("HistoryRow", back_populates="run", cascade="all, delete-orphan",
                           order_by="HistoryRow.iteration")
    metrics = relationship("Metric", back_populates="run", cascade="all, delete-orphan")


class HistoryRow(Base):
    """Loss and gradient norm before one optimizer update"""
    __tablename__ = "history"
    __table_args__ = (
        Index('idx_history_run_iteration', 'run_id', 'iteration', unique=True),
    )

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    iteration = Column(Integer, nullable=False)
    loss = Column(Float, nullable=False)
    grad_norm = Column(Float, nullable=False)
    wall_ms = Column(Float)

    run = relationship("Run", back_populates="history")


class Metric(Base):
    """A named diagnostic value"""
    __tablename__ = "metrics"
    __table_args__ = (
        Index('idx_metric_run_name', 'run_id', 'name', unique=True),
    )

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey("runs.id"), nullable=False)
    name = Column(String(100), nullable=False)
    value = Column(Float)

    run = relationship("Run", back_populates="metrics")
