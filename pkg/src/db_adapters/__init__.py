"""
Run registry for OCN experiments

Every CLI command can record its configuration, training history and
diagnostic metrics in a SQLite database through SQLAlchemy ORM.

Usage:
    from src.db_adapters import create_run_store

    store = create_run_store(config)  # None when OCN_RECORD_RUNS=false
"""

from .factory import MEMORY_PATHS, create_run_store
from .adapter import RunStore

__all__ = ["create_run_store", "RunStore", "MEMORY_PATHS"]
