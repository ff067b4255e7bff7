"""
Base run store interface

This module defines the abstract base class for run registries.
"""

from abc import ABC, abstractmethod
from typing import Any, Dict, Iterable, List, Optional


class RunStore(ABC):
    """
    Abstract base class for run registries.

    A run is opened when a command starts, receives history rows and metrics
    while it executes, and is closed with a status when it finishes.
    """

    @abstractmethod
    def initialize_schema(self) -> None:
        """Create the tables if they do not exist."""
        pass

    @abstractmethod
    def close(self) -> None:
        """Release connections."""
        pass

    @abstractmethod
    def start_run(self, command: str, config: Optional[Dict[str, Any]] = None,
                  preset: Optional[str] = None) -> int:
        """
        Record the start of a command.

        Args:
            command: Subcommand name
            config: Validated RunConfig document, if the command has one
            preset: Preset name, if one was used

        Returns:
            The new run ID
        """
        pass

    @abstractmethod
    def finish_run(self, run_id: int, status: str, message: Optional[str] = None,
                   final_loss: Optional[float] = None,
                   artifacts: Optional[Dict[str, str]] = None) -> None:
        """Mark a run as finished ("ok" or "failed")."""
        pass

    @abstractmethod
    def add_history(self, run_id: int, entries: Iterable[Any]) -> int:
        """
        Store training history rows.

        Args:
            run_id: Run to attach to
            entries: Objects with iteration, loss, grad_norm and wall_ms attributes

        Returns:
            Number of rows stored
        """
        pass

    @abstractmethod
    def add_metrics(self, run_id: int, metrics: Dict[str, float]) -> None:
        """Store or replace named metric values."""
        pass

    @abstractmethod
    def get_run(self, run_id: int) -> Optional[Dict[str, Any]]:
        """Run row as a dictionary, or None if not found."""
        pass

    @abstractmethod
    def list_runs(self, command: Optional[str] = None, limit: int = 50) -> List[Dict[str, Any]]:
        """Most recent runs first, optionally filtered by command."""
        pass

    @abstractmethod
    def get_history(self, run_id: int) -> List[Dict[str, Any]]:
        """History rows of a run ordered by iteration."""
        pass

    @abstractmethod
    def get_metrics(self, run_id: int) -> Dict[str, float]:
        """Metric values of a run by name."""
        pass
