"""
Factory for creating run stores

This module provides a factory function to create the run registry
based on the configuration.
"""

import logging
from typing import Optional

from .adapter import RunStore
from .sqlite_adapter import SQLiteRunStore

logger = logging.getLogger(__name__)

MEMORY_PATHS = (":memory:", "sqlite://")


def create_run_store(config) -> Optional[RunStore]:
    """
    Factory function to create the run registry.

    Args:
        config: Configuration object with record_runs, database_path and
            database_timeout

    Returns:
        An initialized RunStore, or None when recording is disabled

    Example:
        >>> store = create_run_store(config)
        >>> run_id = store.start_run("train", document)
    """
    if not getattr(config, "record_runs", True):
        logger.debug("Run recording disabled")
        return None

    database_path = getattr(config, "database_path", ":memory:")
    timeout = getattr(config, "database_timeout", 60.0)

    if database_path in MEMORY_PATHS:
        store = SQLiteRunStore(database_path=None, timeout=timeout)
    else:
        store = SQLiteRunStore(database_path=database_path, timeout=timeout)

    store.initialize_schema()
    return store
