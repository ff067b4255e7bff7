"""
Ground-truth dynamical systems and dataset generation.

Four systems are known: a linear gradient flow, a nonlinear gradient flow,
the damped pendulum and the Lorenz system. Experiment presets bundle a
system with its sampling domain, horizon, data spacing and network size.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, GenerationError, ModeError, NumericError
from .solver import DOPRI5, StepControl, integrate_through, observed_states
from .train import Dataset, Trajectory

logger = logging.getLogger(__name__)

LORENZ_SIGMA = 10.0
LORENZ_RHO = 28.0
LORENZ_BETA = 8.0 / 3.0

PENDULUM_DAMPING = 0.2
PENDULUM_GRAVITY = 8.91

GENERATOR_RTOL = 1e-10
GENERATOR_ATOL = 1e-12


# ---------------------------------------------------------------------------
# Systems
# ---------------------------------------------------------------------------

def _linear_gf_potential(x: np.ndarray) -> np.ndarray:
    x1, x2 = x[..., 0], x[..., 1]
    return x1 ** 2 + x1 * x2 + x2 ** 2


def _linear_gf_drift(x: np.ndarray) -> np.ndarray:
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([-2.0 * x1 - x2, -x1 - 2.0 * x2], axis=-1)


def _nonlinear_gf_potential(x: np.ndarray) -> np.ndarray:
    return np.sin(x[..., 0]) * np.cos(x[..., 1])


def _nonlinear_gf_drift(x: np.ndarray) -> np.ndarray:
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([-np.cos(x1) * np.cos(x2), np.sin(x1) * np.sin(x2)], axis=-1)


def _pendulum_drift(x: np.ndarray) -> np.ndarray:
    x1, x2 = x[..., 0], x[..., 1]
    return np.stack([x2, -PENDULUM_DAMPING * x2 - PENDULUM_GRAVITY * np.sin(x1)], axis=-1)


def pendulum_energy(x) -> np.ndarray:
    """Mechanical energy; non-increasing along pendulum trajectories."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x[..., 1] ** 2 + PENDULUM_GRAVITY * (1.0 - np.cos(x[..., 0]))


def _lorenz_drift(x: np.ndarray) -> np.ndarray:
    u, v, w = x[..., 0], x[..., 1], x[..., 2]
    return np.stack([
        LORENZ_SIGMA * (v - u),
        u * (LORENZ_RHO - w) - v,
        u * v - LORENZ_BETA * w,
    ], axis=-1)


def lorenz_equilibria() -> np.ndarray:
    """The origin and the two symmetric fixed points C+ and C-."""
    r = np.sqrt(LORENZ_BETA * (LORENZ_RHO - 1.0))
    return np.array([
        [0.0, 0.0, 0.0],
        [r, r, LORENZ_RHO - 1.0],
        [-r, -r, LORENZ_RHO - 1.0],
    ])


@dataclass(frozen=True)
class SystemSpec:
    """A known dynamical system x' = F(x), optionally a gradient flow of f."""
    name: str
    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None

    @property
    def is_gradient_flow(self) -> bool:
        return self.potential is not None

    @property
    def field_mode(self) -> str:
        return 'scalar' if self.is_gradient_flow else 'vector'


SYSTEMS: Dict[str, SystemSpec] = {
    'linear-gf': SystemSpec('linear-gf', 2, _linear_gf_drift, _linear_gf_potential),
    'nonlinear-gf': SystemSpec('nonlinear-gf', 2, _nonlinear_gf_drift, _nonlinear_gf_potential),
    'pendulum': SystemSpec('pendulum', 2, _pendulum_drift),
    'lorenz': SystemSpec('lorenz', 3, _lorenz_drift),
}


def get_system(name: str) -> SystemSpec:
    try:
        return SYSTEMS[name]
    except KeyError:
        raise ConfigurationError(f"Unknown system: {name!r}. Valid options are: {sorted(SYSTEMS)}")


def _as_state(system: SystemSpec, x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0 or arr.shape[-1] != system.dim:
        raise ConfigurationError(f"{system.name} states have dimension {system.dim}, got shape {arr.shape}")
    return arr


def true_drift(system: Union[SystemSpec, str], x) -> np.ndarray:
    if isinstance(system, str):
        system = get_system(system)
    return system.drift(_as_state(system, x))


def true_potential(system: Union[SystemSpec, str], x) -> np.ndarray:
    if isinstance(system, str):
        system = get_system(system)
    if not system.is_gradient_flow:
        raise ModeError(f"System {system.name} is not a gradient flow and has no potential")
    return system.potential(_as_state(system, x))


# ---------------------------------------------------------------------------
# Initial points
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]

    def __post_init__(self):
        if len(self.lower) != len(self.upper) or not self.lower:
            raise ConfigurationError("Box bounds must be non-empty and of equal length")
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise ConfigurationError(f"Degenerate box: lower={self.lower}, upper={self.upper}")

    def to_document(self) -> Dict[str, Any]:
        return {'box': [[lo, hi] for lo, hi in zip(self.lower, self.upper)]}


@dataclass(frozen=True)
class Ball:
    center: Tuple[float, ...]
    radius: float

    def __post_init__(self):
        if self.radius <= 0 or not self.center:
            raise ConfigurationError(f"Ball needs a center and positive radius, got {self.radius}")

    def to_document(self) -> Dict[str, Any]:
        return {'ball': {'center': list(self.center), 'radius': self.radius}}


@dataclass(frozen=True)
class Points:
    points: Tuple[Tuple[float, ...], ...]

    def to_document(self) -> Dict[str, Any]:
        return {'points': [list(p) for p in self.points]}


Domain = Union[Box, Ball, Points]


def domain_from_document(document: Dict[str, Any]) -> Domain:
    if 'box' in document:
        bounds = document['box']
        return Box(tuple(float(b[0]) for b in bounds), tuple(float(b[1]) for b in bounds))
    if 'ball' in document:
        return Ball(tuple(float(c) for c in document['ball']['center']), float(document['ball']['radius']))
    if 'points' in document:
        return Points(tuple(tuple(float(c) for c in p) for p in document['points']))
    raise ConfigurationError(f"Unrecognized domain document: {document}")


def domain_dim(domain: Domain) -> int:
    if isinstance(domain, Box):
        return len(domain.lower)
    if isinstance(domain, Ball):
        return len(domain.center)
    return len(domain.points[0])


def sample_initials(domain: Domain, m: int, seed: int) -> np.ndarray:
    """
    Draw m initial points, uniform over a box or ball.

    Explicit point lists are returned as given (their first m entries).
    """
    if m < 1:
        raise ConfigurationError(f"Need at least one initial point, got m={m}")
    if isinstance(domain, Points):
        if m > len(domain.points):
            raise ConfigurationError(f"Requested {m} initial points but only {len(domain.points)} are listed")
        return np.array(domain.points[:m], dtype=np.float64)

    rng = np.random.default_rng(seed)
    if isinstance(domain, Box):
        lower = np.array(domain.lower)
        upper = np.array(domain.upper)
        return rng.uniform(lower, upper, size=(m, lower.size))

    center = np.array(domain.center)
    d = center.size
    directions = rng.normal(size=(m, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = domain.radius * rng.uniform(0.0, 1.0, size=(m, 1)) ** (1.0 / d)
    return center + radii * directions


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def observation_times(T: float, dt: float) -> np.ndarray:
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T / dt):
        raise ConfigurationError(f"T={T} is not an integer multiple of dt={dt}")
    return np.arange(n + 1) * dt


def simulate(system: SystemSpec, x0, times: Sequence[float],
             ctrl: Optional[StepControl] = None) -> np.ndarray:
    """True trajectory sampled exactly at ``times`` (shape (len(times), d))."""
    ctrl = ctrl or StepControl.adaptive_tol(GENERATOR_RTOL, GENERATOR_ATOL)
    tapes = integrate_through(system.drift, _as_state(system, x0), times, DOPRI5, ctrl)
    return observed_states(tapes)


def generate_dataset(system: Union[SystemSpec, str], initials, T: float, dt: float,
                     gen_ctrl: Optional[StepControl] = None,
                     seed: Optional[int] = None,
                     workers: int = 1) -> Dataset:
    """
    Integrate the true system from each initial point and record states at
    multiples of dt.

    Raises:
        GenerationError: naming the trajectory whose integration failed
    """
    if isinstance(system, str):
        system = get_system(system)
    gen_ctrl = gen_ctrl or StepControl.adaptive_tol(GENERATOR_RTOL, GENERATOR_ATOL)
    initials = _as_state(system, np.atleast_2d(initials))
    times = observation_times(T, dt)

    def run(index: int) -> np.ndarray:
        try:
            states = simulate(system, initials[index], times, gen_ctrl)
        except NumericError as e:
            raise GenerationError(f"Trajectory {index} from {initials[index].tolist()} failed: {e}", index) from e
        logger.debug(f"Generated trajectory {index} of {system.name} ({len(times)} points)")
        return states

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            all_states = list(pool.map(run, range(len(initials))))
    else:
        all_states = [run(i) for i in range(len(initials))]

    metadata = {
        'system': system.name,
        'seed': seed,
        'dt': dt,
        'T': T,
        'generator': {'method': DOPRI5.name, 'rtol': gen_ctrl.rtol, 'atol': gen_ctrl.atol},
    }
    logger.info(f"Generated {len(all_states)} trajectories of {system.name} with {len(times)} points each")
    return Dataset([Trajectory(states=s, t0=0.0) for s in all_states], dt=dt, metadata=metadata)


# ---------------------------------------------------------------------------
# Experiment presets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    system: str
    domain: Domain
    m: int
    T: float
    dt: float
    dims: Tuple[int, ...]
    seed: int = 0
    eval_T: Optional[float] = None
    eval_samples: int = 0
    K: int = 2000
    threshold: Optional[float] = None

    @property
    def mode(self) -> str:
        return get_system(self.system).field_mode

    def to_document(self) -> Dict[str, Any]:
        """A complete RunConfig document for this preset."""
        return {
            'system': {
                'name': self.system,
                'domain': self.domain.to_document(),
                'm': self.m,
                'T': self.T,
                'dt': self.dt,
                'seed': self.seed,
            },
            'network': {'dims': list(self.dims), 'mode': self.mode},
            'training': {
                'batch_len': 2,
                'loss': {'kind': 'standard', 'omega': 0.0},
                'optimizer': {'kind': 'adam', 'eta': 1e-3, 'K': self.K, 'threshold': self.threshold},
                'log_every': 100,
            },
            'solver': {'mode': 'adaptive', 'method': 'dopri5', 'rtol': 1e-6, 'atol': 1e-8},
            'evaluation': {'T': self.eval_T, 'samples': self.eval_samples, 'seed': self.seed + 1, 'grid_factor': 10},
            'output': {'directory': None, 'emit_csv': True, 'emit_plots_data': True},
        }


PRESETS: Dict[str, ExperimentPreset] = {p.name: p for p in (
    ExperimentPreset('linear-gf', 'linear-gf', Box((-2.0, -2.0), (2.0, 2.0)), m=8, T=5.0, dt=0.05,
                     dims=(2, 50, 50, 1), seed=2022, eval_samples=4, threshold=1e-3),
    ExperimentPreset('nonlinear-gf', 'nonlinear-gf', Box((-6.0, -4.0), (6.0, 6.0)), m=24, T=8.0, dt=0.05,
                     dims=(2, 200, 200, 1), seed=2022, eval_samples=8),
    ExperimentPreset('pendulum', 'pendulum', Points(((-1.0, -1.0),)), m=1, T=5.0, dt=0.05,
                     dims=(2, 100, 2), eval_T=20.0),
    ExperimentPreset('lorenz-short', 'lorenz', Points(((10.0, 15.0, 17.0),)), m=1, T=1.5, dt=0.01,
                     dims=(3, 300, 300, 300, 3), eval_T=3.0),
    ExperimentPreset('lorenz-long', 'lorenz', Points(((-8.0, 8.0, 27.0),)), m=1, T=20.0, dt=0.01,
                     dims=(3, 300, 300, 300, 3), eval_T=20.0),
    ExperimentPreset('lorenz-ball', 'lorenz', Ball((10.0, 15.0, 17.0), 1.0), m=3, T=3.0, dt=0.01,
                     dims=(3, 300, 300, 300, 3), seed=2022, eval_samples=300),
)}


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"Unknown preset: {name!r}. Valid options are: {sorted(PRESETS)}")
