"""
File formats for datasets, checkpoints, training history and reports.

Decimals are written with 17 significant digits so float64 values survive
a write/read cycle exactly.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Union

import numpy as np

from .errors import ConfigurationError
from .field import MlpField
from .train import Dataset, HistoryEntry, Trajectory

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def fmt(value: float) -> str:
    return f"{float(value):.17g}"


def _prepare(path: PathLike) -> Path:
    output_path = Path(path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    return output_path


def sidecar_path(csv_path: PathLike) -> Path:
    return Path(csv_path).with_suffix('.json')


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------

def write_dataset(dataset: Dataset, path: PathLike) -> Path:
    """Write ``traj_id,t,x1..xd`` rows plus a JSON sidecar with the metadata."""
    output_path = _prepare(path)
    d = dataset.dim
    with open(output_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['traj_id', 't'] + [f'x{i + 1}' for i in range(d)])
        for traj_id, traj in enumerate(dataset.trajectories):
            for i, state in enumerate(traj.states):
                writer.writerow([traj_id, fmt(traj.t0 + i * dataset.dt)] + [fmt(x) for x in state])

    sidecar = dict(dataset.metadata)
    sidecar.update({'dt': dataset.dt, 'T': dataset.horizon, 'n': dataset.n, 'm': dataset.m, 'd': d})
    with open(sidecar_path(output_path), 'w', encoding='utf-8') as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write('\n')

    logger.info(f"Wrote {dataset.m} trajectories ({dataset.n + 1} rows each) to {output_path}")
    return output_path


def read_dataset(path: PathLike) -> Dataset:
    """
    Read a dataset CSV (and its sidecar if present).

    Raises:
        ConfigurationError: missing file, malformed rows or non-uniform spacing
    """
    input_path = Path(path)
    if not input_path.is_file():
        raise ConfigurationError(f"Dataset file not found: {input_path}")

    rows: Dict[int, List[List[float]]] = {}
    try:
        with open(input_path, newline='', encoding='utf-8') as f:
            reader = csv.reader(f)
            header = next(reader, None)
            if not header or header[:2] != ['traj_id', 't'] or len(header) < 3:
                raise ConfigurationError(f"{input_path}: expected header 'traj_id,t,x1,...', got {header}")
            for line_no, row in enumerate(reader, start=2):
                if len(row) != len(header):
                    raise ConfigurationError(
                        f"{input_path}:{line_no}: expected {len(header)} columns, got {len(row)}")
                try:
                    rows.setdefault(int(row[0]), []).append([float(v) for v in row[1:]])
                except ValueError as e:
                    raise ConfigurationError(f"{input_path}:{line_no}: {e}") from e
    except (UnicodeDecodeError, csv.Error) as e:
        raise ConfigurationError(f"{input_path} is not a readable CSV file: {e}") from e

    if not rows:
        raise ConfigurationError(f"{input_path}: no samples")

    trajectories = []
    dt = None
    for traj_id in sorted(rows):
        table = np.array(rows[traj_id])
        times, states = table[:, 0], table[:, 1:]
        spacing = np.diff(times)
        if spacing.size == 0:
            raise ConfigurationError(f"{input_path}: trajectory {traj_id} has a single sample")
        step = float(spacing[0]) if dt is None else dt
        if step <= 0 or np.max(np.abs(spacing - step)) > 1e-9 * max(1.0, abs(step)):
            raise ConfigurationError(f"{input_path}: trajectory {traj_id} is not uniformly spaced with dt={step}")
        dt = step
        trajectories.append(Trajectory(states=states, t0=float(times[0])))

    metadata: Dict[str, Any] = {}
    sidecar = sidecar_path(input_path)
    if sidecar.is_file():
        metadata = read_json(sidecar)
        try:
            dt = float(metadata.get('dt', dt))
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"{sidecar}: dt must be a number: {e}") from e

    return Dataset(trajectories, dt=dt, metadata=metadata)


# ---------------------------------------------------------------------------
# Checkpoint
# ---------------------------------------------------------------------------

def save_checkpoint(field: MlpField, path: PathLike) -> Path:
    output_path = _prepare(path)
    document = field.to_document()
    params = ', '.join(fmt(x) for x in document['params'])
    text = (
        '{"layer_dims": ' + json.dumps(document['layer_dims'])
        + ', "mode": ' + json.dumps(document['mode'])
        + ', "params": [' + params + ']}\n'
    )
    with open(output_path, 'w', encoding='utf-8') as f:
        f.write(text)
    logger.info(f"Saved checkpoint ({field.n_params} parameters) to {output_path}")
    return output_path


def load_checkpoint(path: PathLike) -> MlpField:
    input_path = Path(path)
    if not input_path.is_file():
        raise ConfigurationError(f"Checkpoint file not found: {input_path}")
    return MlpField.from_document(read_json(input_path))


# ---------------------------------------------------------------------------
# History, reports, tables
# ---------------------------------------------------------------------------

def write_history(history: Sequence[HistoryEntry], path: PathLike) -> Path:
    output_path = _prepare(path)
    with open(output_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(['iteration', 'J', 'grad_norm', 'wall_ms'])
        for entry in history:
            writer.writerow([entry.iteration, fmt(entry.loss), fmt(entry.grad_norm), f"{entry.wall_ms:.3f}"])
    return output_path


def write_table(header: Sequence[str], rows: Iterable[Sequence[Any]], path: PathLike) -> Path:
    """Generic CSV table; floats use 17 significant digits."""
    output_path = _prepare(path)
    with open(output_path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return output_path


def write_predictions(comparisons: Sequence[Any], path: PathLike, stride: int = 1) -> Path:
    """
    True and predicted states side by side, one row per trajectory and time.

    ``comparisons`` carry ``times``, ``truth`` and ``predicted`` arrays; every
    ``stride``-th grid point is written.
    """
    d = comparisons[0].truth.shape[1]
    header = ['traj_id', 't'] + [f'x{i + 1}' for i in range(d)] + [f'y{i + 1}' for i in range(d)]
    rows = (
        [traj_id, float(t)] + [float(v) for v in x] + [float(v) for v in y]
        for traj_id, c in enumerate(comparisons)
        for t, x, y in zip(c.times[::stride], c.truth[::stride], c.predicted[::stride])
    )
    return write_table(header, rows, path)


def write_json(document: Dict[str, Any], path: PathLike) -> Path:
    output_path = _prepare(path)
    with open(output_path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2, sort_keys=True, default=_json_default)
        f.write('\n')
    return output_path


def read_json(path: PathLike) -> Dict[str, Any]:
    """
    Read a JSON object from disk.

    Raises:
        ConfigurationError: missing file, undecodable text, invalid JSON or a non-object top level
    """
    input_path = Path(path)
    if not input_path.is_file():
        raise ConfigurationError(f"File not found: {input_path}")
    try:
        with open(input_path, encoding='utf-8') as f:
            document = json.load(f)
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"{input_path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigurationError(f"{input_path} must hold a JSON object, got {type(document).__name__}")
    return document


def _json_default(value: Any):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return str(value)
