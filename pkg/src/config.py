"""
Configuration management for OCN experiments.

Process settings (logging, output location, run registry) are loaded from
environment variables; experiment settings are read from a RunConfig JSON
document that is validated in full before any work starts.
"""

import os
import copy
import logging
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from .errors import ConfigurationError

# Load environment variables from .env file if it exists
load_dotenv()

logger = logging.getLogger(__name__)

VALID_MODES = ('scalar', 'vector')
VALID_LOSS_KINDS = ('standard', 'augmented')
VALID_OPTIMIZERS = ('gd', 'adam')
VALID_SOLVER_MODES = ('fixed', 'adaptive')
VALID_METHODS = ('euler', 'rk4', 'dopri5')


class Config:
    """Process-level settings loaded from environment variables."""

    def __init__(self):
        """Initialize configuration from environment variables."""
        # Logging
        log_level = os.getenv('OCN_LOG_LEVEL', 'INFO').upper()
        self.log_level = getattr(logging, log_level, logging.INFO)

        # Default output directory for artifacts when --out is not given
        self.output_dir = os.getenv('OCN_OUTPUT_DIR', './runs')

        # Run registry (SQLite through SQLAlchemy)
        self.record_runs = os.getenv('OCN_RECORD_RUNS', 'true').lower() == 'true'
        self.database_timeout = self._parse_float('OCN_DATABASE_TIMEOUT', '60.0')
        self.database_path = os.getenv(
            'OCN_DATABASE_PATH', os.path.join(self.output_dir, 'runs.db')
        )

        # Thread-pool width for per-trajectory work during training
        self.workers = self._parse_int('OCN_WORKERS', '1')
        if self.workers < 1:
            raise ConfigurationError(f"OCN_WORKERS must be >= 1, got {self.workers}")

        logger.debug(f"Output directory: {self.output_dir}")
        logger.debug(f"Run registry: {self.database_path if self.record_runs else 'disabled'}")

    def _parse_int(self, key: str, default: str) -> int:
        value = os.getenv(key, default)
        try:
            return int(value)
        except ValueError as e:
            raise ConfigurationError(f"Environment variable '{key}' must be a valid int: {e}") from e

    def _parse_float(self, key: str, default: str) -> float:
        value = os.getenv(key, default)
        try:
            return float(value)
        except ValueError as e:
            raise ConfigurationError(f"Environment variable '{key}' must be a valid float: {e}") from e

    def ensure_directories(self, *paths: str):
        """Create the registry directory and any extra output directories."""
        if self.record_runs:
            db_dir = os.path.dirname(self.database_path)
            if db_dir:
                os.makedirs(db_dir, exist_ok=True)
        for path in paths:
            os.makedirs(path, exist_ok=True)


def setup_logging(config: Config):
    """
    Configure logging for the application.

    Args:
        config: Configuration object with log level
    """
    logging.basicConfig(
        level=config.log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    # SQLAlchemy engine logging is noisy at INFO
    logging.getLogger('sqlalchemy').setLevel(logging.WARNING)


# ---------------------------------------------------------------------------
# RunConfig: the experiment document
# ---------------------------------------------------------------------------

def _check_keys(data: Any, allowed: set, where: str) -> Dict[str, Any]:
    if not isinstance(data, dict):
        raise ConfigurationError(f"'{where}' must be an object, got {type(data).__name__}")
    unknown = set(data) - allowed
    if unknown:
        raise ConfigurationError(
            f"Unknown keys in '{where}': {sorted(unknown)}. Valid keys are: {sorted(allowed)}"
        )
    return data


def _positive(value: Any, where: str, allow_zero: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"'{where}' must be a number, got {value!r}")
    if value < 0 or (value == 0 and not allow_zero):
        raise ConfigurationError(f"'{where}' must be {'>= 0' if allow_zero else '> 0'}, got {value}")
    return float(value)


def _integer(value: Any, where: str, minimum: int) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigurationError(f"'{where}' must be an integer, got {value!r}")
    if value < minimum:
        raise ConfigurationError(f"'{where}' must be >= {minimum}, got {value}")
    return value


def _choice(value: Any, options: tuple, where: str) -> str:
    if value not in options:
        raise ConfigurationError(f"'{where}' must be one of {list(options)}, got {value!r}")
    return value


@dataclass
class DomainSection:
    """Where initial points come from: an axis-aligned box, a ball, or explicit points."""
    box: Optional[List[List[float]]] = None
    ball: Optional[Dict[str, Any]] = None
    points: Optional[List[List[float]]] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DomainSection':
        _check_keys(data, {'box', 'ball', 'points'}, 'system.domain')
        data = {key: value for key, value in data.items() if value is not None}
        if sum(key in data for key in ('box', 'ball', 'points')) != 1:
            raise ConfigurationError("'system.domain' needs exactly one of 'box', 'ball', 'points'")
        if 'ball' in data:
            ball = _check_keys(data['ball'], {'center', 'radius'}, 'system.domain.ball')
            if 'center' not in ball or 'radius' not in ball:
                raise ConfigurationError("'system.domain.ball' needs 'center' and 'radius'")
            _positive(ball['radius'], 'system.domain.ball.radius')
        if 'box' in data:
            for bounds in data['box']:
                if len(bounds) != 2 or not bounds[0] < bounds[1]:
                    raise ConfigurationError(f"Degenerate box bounds {bounds}; need [low, high] with low < high")
        if 'points' in data and not data['points']:
            raise ConfigurationError("'system.domain.points' must not be empty")
        return cls(**data)


@dataclass
class SystemSection:
    name: str
    domain: DomainSection
    m: int
    T: float
    dt: float
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SystemSection':
        _check_keys(data, {'name', 'domain', 'm', 'T', 'dt', 'seed'}, 'system')
        for key in ('name', 'domain', 'm', 'T', 'dt'):
            if key not in data:
                raise ConfigurationError(f"'system.{key}' is required")
        section = cls(
            name=str(data['name']),
            domain=DomainSection.from_dict(data['domain']),
            m=_integer(data['m'], 'system.m', 1),
            T=_positive(data['T'], 'system.T'),
            dt=_positive(data['dt'], 'system.dt'),
            seed=_integer(data.get('seed', 0), 'system.seed', 0),
        )
        steps = section.T / section.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
            raise ConfigurationError(f"system.T={section.T} is not an integer multiple of system.dt={section.dt}")
        return section


@dataclass
class NetworkSection:
    dims: List[int]
    mode: str

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NetworkSection':
        _check_keys(data, {'dims', 'mode'}, 'network')
        if 'dims' not in data or 'mode' not in data:
            raise ConfigurationError("'network' needs 'dims' and 'mode'")
        dims = data['dims']
        if not isinstance(dims, list) or len(dims) < 2:
            raise ConfigurationError(f"'network.dims' must list at least 2 layer widths, got {dims!r}")
        return cls(
            dims=[_integer(width, 'network.dims[]', 1) for width in dims],
            mode=_choice(data['mode'], VALID_MODES, 'network.mode'),
        )


@dataclass
class LossSection:
    kind: str = 'standard'
    omega: float = 0.0

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LossSection':
        _check_keys(data, {'kind', 'omega'}, 'training.loss')
        section = cls(
            kind=_choice(data.get('kind', 'standard'), VALID_LOSS_KINDS, 'training.loss.kind'),
            omega=_positive(data.get('omega', 0.0), 'training.loss.omega', allow_zero=True),
        )
        if section.kind == 'augmented' and section.omega <= 0:
            raise ConfigurationError("'training.loss.omega' must be > 0 for the augmented loss")
        return section


@dataclass
class OptimizerSection:
    kind: str = 'adam'
    eta: float = 1e-3
    K: int = 1000
    threshold: Optional[float] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OptimizerSection':
        _check_keys(data, {'kind', 'eta', 'K', 'threshold', 'beta1', 'beta2', 'eps'}, 'training.optimizer')
        section = cls(
            kind=_choice(data.get('kind', 'adam'), VALID_OPTIMIZERS, 'training.optimizer.kind'),
            eta=_positive(data.get('eta', 1e-3), 'training.optimizer.eta'),
            K=_integer(data.get('K', 1000), 'training.optimizer.K', 0),
            threshold=None if data.get('threshold') is None
            else _positive(data['threshold'], 'training.optimizer.threshold', allow_zero=True),
            beta1=_positive(data.get('beta1', 0.9), 'training.optimizer.beta1', allow_zero=True),
            beta2=_positive(data.get('beta2', 0.999), 'training.optimizer.beta2', allow_zero=True),
            eps=_positive(data.get('eps', 1e-8), 'training.optimizer.eps'),
        )
        if section.beta1 >= 1 or section.beta2 >= 1:
            raise ConfigurationError("Adam moments must satisfy 0 <= beta < 1")
        return section


@dataclass
class TrainingSection:
    batch_len: int = 2
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    log_every: int = 100

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TrainingSection':
        _check_keys(data, {'batch_len', 'loss', 'optimizer', 'log_every'}, 'training')
        return cls(
            batch_len=_integer(data.get('batch_len', 2), 'training.batch_len', 2),
            loss=LossSection.from_dict(data.get('loss', {})),
            optimizer=OptimizerSection.from_dict(data.get('optimizer', {})),
            log_every=_integer(data.get('log_every', 100), 'training.log_every', 1),
        )


@dataclass
class SolverSection:
    mode: str = 'adaptive'
    method: str = 'dopri5'
    rtol: float = 1e-6
    atol: float = 1e-8
    h: Optional[float] = None
    h_min: float = 1e-12
    h_max: Optional[float] = None
    max_steps: int = 100_000
    safety: float = 0.9

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SolverSection':
        allowed = {'mode', 'method', 'rtol', 'atol', 'h', 'h_min', 'h_max', 'max_steps', 'safety'}
        _check_keys(data, allowed, 'solver')
        section = cls(
            mode=_choice(data.get('mode', 'adaptive'), VALID_SOLVER_MODES, 'solver.mode'),
            method=_choice(data.get('method', 'dopri5'), VALID_METHODS, 'solver.method'),
            rtol=_positive(data.get('rtol', 1e-6), 'solver.rtol'),
            atol=_positive(data.get('atol', 1e-8), 'solver.atol'),
            h=None if data.get('h') is None else _positive(data['h'], 'solver.h'),
            h_min=_positive(data.get('h_min', 1e-12), 'solver.h_min'),
            h_max=None if data.get('h_max') is None else _positive(data['h_max'], 'solver.h_max'),
            max_steps=_integer(data.get('max_steps', 100_000), 'solver.max_steps', 1),
            safety=_positive(data.get('safety', 0.9), 'solver.safety'),
        )
        if section.mode == 'fixed' and section.h is None:
            raise ConfigurationError("'solver.h' is required when solver.mode is 'fixed'")
        if section.mode == 'adaptive' and section.method != 'dopri5':
            raise ConfigurationError("Adaptive stepping needs an embedded pair; use solver.method 'dopri5'")
        if section.h_max is not None and section.h_min > section.h_max:
            raise ConfigurationError("'solver.h_min' must not exceed 'solver.h_max'")
        return section


@dataclass
class EvaluationSection:
    T: Optional[float] = None
    samples: int = 0
    seed: int = 1
    grid_factor: int = 10

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvaluationSection':
        _check_keys(data, {'T', 'samples', 'seed', 'grid_factor'}, 'evaluation')
        return cls(
            T=None if data.get('T') is None else _positive(data['T'], 'evaluation.T'),
            samples=_integer(data.get('samples', 0), 'evaluation.samples', 0),
            seed=_integer(data.get('seed', 1), 'evaluation.seed', 0),
            grid_factor=_integer(data.get('grid_factor', 10), 'evaluation.grid_factor', 1),
        )


@dataclass
class OutputSection:
    directory: Optional[str] = None
    emit_csv: bool = True
    emit_plots_data: bool = True

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'OutputSection':
        _check_keys(data, {'directory', 'emit_csv', 'emit_plots_data'}, 'output')
        return cls(
            directory=data.get('directory'),
            emit_csv=bool(data.get('emit_csv', True)),
            emit_plots_data=bool(data.get('emit_plots_data', True)),
        )


@dataclass
class RunConfig:
    """A fully validated experiment document."""
    system: SystemSection
    network: NetworkSection
    training: TrainingSection = field(default_factory=TrainingSection)
    solver: SolverSection = field(default_factory=SolverSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunConfig':
        _check_keys(data, {'system', 'network', 'training', 'solver', 'evaluation', 'output'}, 'config')
        if 'system' not in data or 'network' not in data:
            raise ConfigurationError("Config needs at least the 'system' and 'network' sections")
        config = cls(
            system=SystemSection.from_dict(data['system']),
            network=NetworkSection.from_dict(data['network']),
            training=TrainingSection.from_dict(data.get('training', {})),
            solver=SolverSection.from_dict(data.get('solver', {})),
            evaluation=EvaluationSection.from_dict(data.get('evaluation', {})),
            output=OutputSection.from_dict(data.get('output', {})),
        )
        if config.solver.mode == 'fixed':
            steps = config.system.dt / config.solver.h
            if abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
                raise ConfigurationError(
                    f"solver.h={config.solver.h} does not divide system.dt={config.system.dt}"
                )
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def merge_documents(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """
    Deep-merge ``override`` into a copy of ``base``.

    Nested objects merge key by key, except ``domain`` which is replaced as a
    whole (a box override must not inherit a preset's ball).
    """
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if key != 'domain' and isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_documents(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged
