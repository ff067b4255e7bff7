"""
Numerical health checks and empirical error-bound diagnostics.

Covers the finite-difference gradient oracle, conservation of delta^T p on a
tape, Hamiltonian drift, solution and vector-field errors against the true
system, and the fitted-constant protocol used to test how errors scale with
the data spacing dt.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BlowUpError, ConfigurationError, DivergenceError, ModeError
from .field import MlpField, ParamVector
from .solver import (
    DOPRI5, INVARIANT_TOLERANCE, ForwardTape, StepControl, adjoint_states, integrate_fixed,
    integrate_through, invariant_drift, observed_states,
)
from .systems import (
    GENERATOR_ATOL, GENERATOR_RTOL, SystemSpec, generate_dataset, observation_times, simulate,
)
from .train import Dataset, LossSpec, SolverSettings, TrainConfig, loss_and_gradient, loss_only, train

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-5
LOSS_COMPARISON_SLACK = 1.5

GradientFn = Callable[[MlpField, Dataset, LossSpec, int, SolverSettings], Tuple[float, ParamVector]]


@dataclass
class DiagnosticsReport:
    """Results of an evaluation; entries that were not computed stay None."""
    loss: Optional[float] = None
    grad_fd_max_rel_err: Optional[float] = None
    invariant_drift_max: Optional[float] = None
    hamiltonian_drift: Optional[float] = None
    trajectory_err_max: Optional[float] = None
    field_err_max: Optional[float] = None
    potential_rms_after_shift: Optional[float] = None
    bound_ratio: Optional[float] = None
    dt: Optional[float] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def metrics(self) -> Dict[str, float]:
        """Computed numeric entries, for the run registry."""
        values = {k: v for k, v in asdict(self).items() if isinstance(v, (int, float)) and v is not None}
        values.update({k: v for k, v in self.extra.items() if isinstance(v, (int, float))})
        return values


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FdCheckResult:
    max_rel_err: float
    max_abs_err: float
    checked: int
    directional: bool


def _default_gradient(field: MlpField, dataset: Dataset, loss_spec: LossSpec, batch_len: int,
                      solver: SolverSettings) -> Tuple[float, ParamVector]:
    return loss_and_gradient(field, dataset, loss_spec, batch_len, solver)


def fd_gradient_check(field: MlpField, dataset: Dataset, loss_spec: LossSpec = LossSpec(),
                      batch_len: int = 2, solver: Optional[SolverSettings] = None, eps: float = 1e-5,
                      max_coordinates: int = 64, directions: int = 20, seed: int = 0,
                      gradient_fn: Optional[GradientFn] = None) -> FdCheckResult:
    """
    Compare the adjoint gradient with central differences of the loss.

    Small fields are checked coordinate by coordinate; fields with more than
    ``max_coordinates`` parameters along ``directions`` random unit vectors.
    Errors are relative to the largest reference derivative.
    """
    solver = solver or SolverSettings.fixed(dataset.dt / 5)
    if solver.ctrl.mode != 'fixed':
        raise ConfigurationError("Gradient checks need a fixed-step solver (adaptive steps are not smooth in theta)")
    gradient_fn = gradient_fn or _default_gradient

    _, grad = gradient_fn(field, dataset, loss_spec, batch_len, solver)
    base = field.get_params()
    perturbed = field.copy()

    def loss_at(params: np.ndarray) -> float:
        return loss_only(perturbed.set_params(params), dataset, loss_spec, batch_len, solver)

    directional = base.size > max_coordinates
    if directional:
        rng = np.random.default_rng(seed)
        basis = rng.normal(size=(directions, base.size))
        basis /= np.linalg.norm(basis, axis=1, keepdims=True)
    else:
        basis = np.eye(base.size)

    reference = np.array([(loss_at(base + eps * u) - loss_at(base - eps * u)) / (2.0 * eps) for u in basis])
    adjoint = basis @ grad
    abs_err = float(np.max(np.abs(adjoint - reference)))
    scale = max(float(np.max(np.abs(reference))), 1e-12)
    result = FdCheckResult(abs_err / scale, abs_err, basis.shape[0], directional)
    logger.info(
        f"Gradient check over {result.checked} {'directions' if directional else 'coordinates'}: "
        f"max rel err {result.max_rel_err:.3e}, max abs err {result.max_abs_err:.3e}"
    )
    return result


# ---------------------------------------------------------------------------
# Invariants on a tape
# ---------------------------------------------------------------------------

def hamiltonian_drift(tape: ForwardTape, field: MlpField, p_trajectory: Sequence[np.ndarray]) -> float:
    """Largest change of H = drift(y) . p over the step boundaries of the tape."""
    states = tape.boundary_states()
    if len(p_trajectory) != len(states):
        raise ConfigurationError(f"Need {len(states)} co-states for the tape, got {len(p_trajectory)}")
    values = [np.sum(field.drift(y) * p, axis=-1) for y, p in zip(states, p_trajectory)]
    return max(float(np.max(np.abs(v - values[0]))) for v in values)


# ---------------------------------------------------------------------------
# Errors against the true system
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryComparison:
    times: np.ndarray
    truth: np.ndarray
    predicted: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return np.linalg.norm(self.truth - self.predicted, axis=-1)

    @property
    def e_max(self) -> float:
        return float(np.max(self.errors))

    def loss_at(self, stride: int) -> float:
        """Squared error summed over every ``stride``-th grid point after the first."""
        diff = self.truth[stride::stride] - self.predicted[stride::stride]
        return float(np.sum(diff ** 2))


def compare_trajectory(field: MlpField, system: SystemSpec, x0, times: Sequence[float],
                       ctrl: Optional[StepControl] = None) -> TrajectoryComparison:
    """Integrate true and learned dynamics from x0 and sample both at ``times``."""
    ctrl = ctrl or StepControl.adaptive_tol(GENERATOR_RTOL, GENERATOR_ATOL)
    x0 = np.asarray(x0, dtype=np.float64)
    try:
        truth = simulate(system, x0, times, ctrl)
    except (DivergenceError, BlowUpError) as e:
        raise type(e)(f"True dynamics from {x0.tolist()}: {e}") from e
    try:
        predicted = observed_states(integrate_through(field.drift, x0, times, DOPRI5, ctrl))
    except (DivergenceError, BlowUpError) as e:
        raise type(e)(f"Learned dynamics from {x0.tolist()}: {e}") from e
    return TrajectoryComparison(np.asarray(times, dtype=np.float64), truth, predicted)


def trajectory_error(field: MlpField, system: SystemSpec, x0, span: Tuple[float, float],
                     grid_dt: float) -> float:
    """max_t |x(t) - y(t)| on a uniform grid of spacing ``grid_dt`` over ``span``."""
    times = span[0] + observation_times(span[1] - span[0], grid_dt)
    return compare_trajectory(field, system, x0, times).e_max


def shifted_rms(values: np.ndarray, reference: np.ndarray) -> float:
    """RMS of the difference after removing its mean (potentials are defined up to a constant)."""
    difference = np.asarray(values, dtype=np.float64) - np.asarray(reference, dtype=np.float64)
    return float(np.sqrt(np.mean((difference - difference.mean()) ** 2)))


def field_error(field: MlpField, system: SystemSpec, points) -> Tuple[float, float]:
    """
    Vector-field error and mean-shifted potential RMS at the given points.

    Returns:
        (max_i |grad f(x_i) - dG/dy(x_i)|, RMS of (G - f) after mean shift)
    """
    if not system.is_gradient_flow or field.mode != 'scalar':
        raise ModeError("field_error needs a gradient-flow system and a scalar-potential field")
    points = np.asarray(points, dtype=np.float64).reshape(-1, system.dim)
    gradient_error = float(np.max(np.linalg.norm(system.drift(points) - field.drift(points), axis=-1)))
    potential_rms = shifted_rms(field.potential(points), system.potential(points))
    return gradient_error, potential_rms


def vector_field_error(field: MlpField, system: SystemSpec, points) -> float:
    """max_i |F(x_i) - drift(x_i)| for any field mode."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, system.dim)
    return float(np.max(np.linalg.norm(system.drift(points) - field.drift(points), axis=-1)))


def bound_ratio(e_max: float, loss: float, dt: float) -> float:
    return e_max / (np.sqrt(loss) + dt ** 2)


def field_bound_ratio(field_err: float, loss: float, dt: float, augmented: bool) -> float:
    if augmented:
        return field_err / (np.sqrt(loss) + dt)
    return field_err / (np.sqrt(loss) / dt + dt)


def constant_spread(constants: Sequence[float]) -> float:
    """max/min of fitted constants; 1 means perfectly stable."""
    values = np.asarray(constants, dtype=np.float64)
    return float(values.max() / values.min())


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_model(field: MlpField, system: SystemSpec, dataset: Dataset,
                   loss_spec: LossSpec = LossSpec(), batch_len: int = 2,
                   solver: Optional[SolverSettings] = None,
                   horizon: Optional[float] = None, grid_factor: int = 10,
                   unseen: Optional[np.ndarray] = None) -> Tuple[DiagnosticsReport, List[TrajectoryComparison], List[TrajectoryComparison]]:
    """
    Assemble a DiagnosticsReport for a trained field.

    Training trajectories are re-predicted from their initial points over
    ``horizon`` (default: the data horizon) on a grid ``grid_factor`` times
    finer than dt. ``unseen`` initial points are predicted the same way and
    their per-trajectory losses at the data spacing go into ``extra``.
    """
    if field.dim != system.dim:
        raise ConfigurationError(f"Field dimension {field.dim} does not match system {system.name} ({system.dim})")
    horizon = horizon or dataset.horizon
    grid_dt = dataset.dt / grid_factor
    times = observation_times(horizon, grid_dt)

    report = DiagnosticsReport(dt=dataset.dt)
    report.loss = loss_only(field, dataset, loss_spec, batch_len, solver)

    seen = [compare_trajectory(field, system, traj.states[0], times) for traj in dataset.trajectories]
    report.trajectory_err_max = max(c.e_max for c in seen)
    report.extra['horizon_loss'] = float(sum(c.loss_at(grid_factor) for c in seen))
    report.bound_ratio = bound_ratio(report.trajectory_err_max, report.loss, dataset.dt)

    points = np.concatenate([traj.states for traj in dataset.trajectories])
    if system.is_gradient_flow and field.mode == 'scalar':
        report.field_err_max, report.potential_rms_after_shift = field_error(field, system, points)
        report.extra['field_bound_ratio'] = field_bound_ratio(
            report.field_err_max, report.loss, dataset.dt, loss_spec.augmented)
    else:
        report.field_err_max = vector_field_error(field, system, points)

    tape = integrate_fixed(field.drift, dataset.trajectories[0].states[0], (0.0, dataset.dt), 'dopri5', dataset.dt / 20)
    rng = np.random.default_rng(0)
    p_end = rng.normal(size=field.dim)
    report.invariant_drift_max = invariant_drift(tape, field, p_end, np.eye(field.dim))
    costates, _ = adjoint_states(tape, field, p_end)
    report.hamiltonian_drift = hamiltonian_drift(tape, field, costates)

    unseen_comparisons: List[TrajectoryComparison] = []
    if unseen is not None and len(unseen):
        unseen_comparisons = [compare_trajectory(field, system, x0, times) for x0 in unseen]
        losses = [c.loss_at(grid_factor) for c in unseen_comparisons]
        report.extra.update({
            'unseen_count': len(losses),
            'unseen_e_max': max(c.e_max for c in unseen_comparisons),
            'unseen_loss_median': float(np.median(losses)),
            'unseen_loss_mean': float(np.mean(losses)),
        })

    logger.info(
        f"Evaluation: J={report.loss:.4e}, e_max={report.trajectory_err_max:.4e}, "
        f"field err={report.field_err_max:.4e}, invariant drift={report.invariant_drift_max:.2e}"
    )
    return report, seen, unseen_comparisons


def loss_histogram(losses: Sequence[float], bins: int = 20) -> List[Tuple[float, float, int]]:
    """(left edge, right edge, count) rows for a histogram of per-trajectory losses."""
    counts, edges = np.histogram(np.asarray(losses, dtype=np.float64), bins=bins)
    return [(float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(len(counts))]


# ---------------------------------------------------------------------------
# Check suite
# ---------------------------------------------------------------------------

@dataclass
class CheckOutcome:
    gradient: FdCheckResult
    invariant: float
    gradient_tolerance: float = GRADIENT_TOLERANCE
    invariant_tolerance: float = INVARIANT_TOLERANCE

    @property
    def passed(self) -> bool:
        return (self.gradient.max_rel_err <= self.gradient_tolerance
                and self.invariant <= self.invariant_tolerance)


def run_check_suite(field: MlpField, dataset: Dataset, seed: int = 0,
                    gradient_fn: Optional[GradientFn] = None) -> CheckOutcome:
    """
    Gradient oracle (both loss kinds) and delta^T p conservation at fixed tolerances.

    The dataset is used as given; callers keep it small.
    """
    solver = SolverSettings.fixed(dataset.dt / 5)
    worst = None
    for loss_spec in (LossSpec(), LossSpec('augmented', 1.0)):
        result = fd_gradient_check(field, dataset, loss_spec, 2, solver, seed=seed, gradient_fn=gradient_fn)
        if worst is None or result.max_rel_err > worst.max_rel_err:
            worst = result

    rng = np.random.default_rng(seed)
    x0 = dataset.trajectories[0].states[0]
    tape = integrate_fixed(field.drift, x0, (0.0, dataset.dt), 'dopri5', dataset.dt / 20)
    drift = invariant_drift(tape, field, rng.normal(size=field.dim), rng.normal(size=(field.dim, field.dim)))

    outcome = CheckOutcome(worst, drift)
    level = logging.INFO if outcome.passed else logging.WARNING
    logger.log(level, f"Check suite {'passed' if outcome.passed else 'FAILED'}: "
                      f"gradient rel err {worst.max_rel_err:.3e} (tol {GRADIENT_TOLERANCE}), "
                      f"invariant drift {drift:.3e} (tol {INVARIANT_TOLERANCE})")
    return outcome


# ---------------------------------------------------------------------------
# Scaling with dt
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingRow:
    dt: float
    loss: float
    e_max: float
    field_err: float
    bound_ratio: float
    field_bound_ratio: float


def scaling_study(system: SystemSpec, initials: np.ndarray, T: float, dts: Sequence[float],
                  config: TrainConfig, unseen: Optional[np.ndarray] = None,
                  grid_factor: int = 10) -> List[ScalingRow]:
    """
    Regenerate data at each dt, train with the same configuration, and
    measure e_max and the vector-field error.

    e_max is taken over the unseen initial points when given, otherwise over
    the training initial points.
    """
    rows = []
    for dt in dts:
        dataset = generate_dataset(system, initials, T, dt)
        field, history = train(config, dataset)
        loss = loss_only(field, dataset, config.loss, config.batch_len, config.solver)
        times = observation_times(T, dt / grid_factor)
        starts = unseen if unseen is not None else initials
        e_max = max(compare_trajectory(field, system, x0, times).e_max for x0 in starts)
        points = np.concatenate([traj.states for traj in dataset.trajectories])
        field_err = vector_field_error(field, system, points)
        rows.append(ScalingRow(dt, loss, e_max, field_err, bound_ratio(e_max, loss, dt),
                               field_bound_ratio(field_err, loss, dt, config.loss.augmented)))
        logger.info(f"dt={dt}: J={loss:.3e} after {len(history)} iterations, e_max={e_max:.3e}, field err={field_err:.3e}")
    return rows


# ---------------------------------------------------------------------------
# Standard vs augmented loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossComparison:
    dt: float
    standard_loss: float
    augmented_loss: float
    standard_field_err: float
    augmented_field_err: float
    augmented_bound_ratio: float

    @property
    def field_err_ratio(self) -> float:
        """Augmented over standard field error; below 1 means the penalty helped."""
        return self.augmented_field_err / self.standard_field_err

    @property
    def improved(self) -> bool:
        return self.field_err_ratio <= LOSS_COMPARISON_SLACK


def compare_losses(system: SystemSpec, dataset: Dataset, config: TrainConfig, omega: float = 1.0,
                   points: Optional[np.ndarray] = None) -> LossComparison:
    """
    Train the same network from the same seed with the standard and the
    augmented loss on one dataset and compare the vector-field errors.

    ``config.loss`` is ignored. Field errors are taken at ``points``, or at
    every observed state when omitted.
    """
    if points is None:
        points = np.concatenate([traj.states for traj in dataset.trajectories])
    results = {}
    for loss_spec in (LossSpec(), LossSpec('augmented', omega)):
        run_config = replace(config, loss=loss_spec)
        field, history = train(run_config, dataset)
        loss = loss_only(field, dataset, loss_spec, config.batch_len, config.solver)
        results[loss_spec.kind] = (loss, vector_field_error(field, system, points))
        logger.info(f"{loss_spec.kind} loss: J={loss:.3e} after {len(history)} iterations, "
                    f"field err={results[loss_spec.kind][1]:.3e}")

    (standard_loss, standard_err), (augmented_loss, augmented_err) = results['standard'], results['augmented']
    comparison = LossComparison(dataset.dt, standard_loss, augmented_loss, standard_err, augmented_err,
                                field_bound_ratio(augmented_err, augmented_loss, dataset.dt, True))
    logger.info(f"dt={dataset.dt}: field err ratio augmented/standard {comparison.field_err_ratio:.3f}")
    return comparison
