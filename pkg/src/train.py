"""
Optimal-control training of the surrogate field.

The loss compares the surrogate's solution with observed trajectories at
every observation time. Each trajectory is split into short batches that
restart from the observed data; all segments of a trajectory are integrated
together as one stacked state. The gradient comes from the backward
co-state sweep with jumps at the observation times.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, NumericError, TrainingError
from .field import MlpField, ParamVector, init_field
from .solver import (
    DOPRI5, INVARIANT_TOLERANCE, ButcherTableau, ForwardTape, StepControl, adjoint_sweep, get_tableau,
    integrate_forward, invariant_drift,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    states: np.ndarray  # (n+1, d)
    t0: float = 0.0


@dataclass
class Dataset:
    """Uniformly sampled trajectories sharing dimension, length and spacing."""
    trajectories: List[Trajectory]
    dt: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.trajectories:
            raise ConfigurationError("Dataset has no trajectories")
        if not self.dt > 0:
            raise ConfigurationError(f"Dataset spacing dt must be positive, got {self.dt}")
        shape = self.trajectories[0].states.shape
        if len(shape) != 2 or shape[0] < 2:
            raise ConfigurationError(f"Trajectory states must be (n+1, d) with n >= 1, got {shape}")
        for j, traj in enumerate(self.trajectories):
            traj.states = np.asarray(traj.states, dtype=np.float64)
            if traj.states.shape != shape:
                raise ConfigurationError(
                    f"Trajectory {j} has shape {traj.states.shape}; all trajectories must share {shape}"
                )
            if not np.all(np.isfinite(traj.states)):
                raise ConfigurationError(f"Trajectory {j} contains non-finite states")

    @property
    def dim(self) -> int:
        return self.trajectories[0].states.shape[1]

    @property
    def n(self) -> int:
        return self.trajectories[0].states.shape[0] - 1

    @property
    def m(self) -> int:
        return len(self.trajectories)

    @property
    def horizon(self) -> float:
        return self.n * self.dt

    @property
    def residual_points(self) -> int:
        return self.m * self.n


def batch_split(trajectory, batch_len: int) -> List[np.ndarray]:
    """
    Split x_0..x_n into segments of ``batch_len`` points sharing endpoints.

    The last segment is shorter when n is not a multiple of batch_len - 1.
    """
    if batch_len < 2:
        raise ConfigurationError(f"batch_len must be >= 2, got {batch_len}")
    states = trajectory.states if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    n = states.shape[0] - 1
    stride = batch_len - 1
    return [states[start:min(start + stride, n) + 1] for start in range(0, n, stride)]


def _segment_groups(states: np.ndarray, batch_len: int) -> List[np.ndarray]:
    """Segments stacked by length, as arrays of shape (k+1, S, d) in segment order."""
    segments = batch_split(states, batch_len)
    groups: List[List[np.ndarray]] = []
    for segment in segments:
        if groups and groups[-1][0].shape == segment.shape:
            groups[-1].append(segment)
        else:
            groups.append([segment])
    return [np.stack(group, axis=1) for group in groups]


# ---------------------------------------------------------------------------
# Loss specification and solver settings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    kind: str = 'standard'
    omega: float = 0.0

    def __post_init__(self):
        if self.kind not in ('standard', 'augmented'):
            raise ConfigurationError(f"Invalid loss kind: {self.kind!r}")
        if self.omega < 0 or (self.kind == 'augmented' and self.omega <= 0):
            raise ConfigurationError(f"Augmented loss needs omega > 0, got {self.omega}")

    @property
    def augmented(self) -> bool:
        return self.kind == 'augmented'


@dataclass(frozen=True)
class SolverSettings:
    """How the surrogate dynamics are integrated during training."""
    ctrl: StepControl = field(default_factory=StepControl)
    tableau: ButcherTableau = DOPRI5

    @classmethod
    def fixed(cls, h: float, method: str = 'dopri5') -> 'SolverSettings':
        return cls(StepControl.fixed(h), get_tableau(method))


# ---------------------------------------------------------------------------
# Loss and gradient
# ---------------------------------------------------------------------------

@dataclass
class _GroupPass:
    observed: np.ndarray          # (k+1, S, d)
    predicted: List[np.ndarray]   # k+1 arrays (S, d), predicted[0] is the data
    tapes: List[ForwardTape]
    residuals: List[Optional[np.ndarray]]
    loss: float


def _group_forward(field: MlpField, observed: np.ndarray, dt: float, loss_spec: LossSpec,
                   solver: SolverSettings) -> _GroupPass:
    k = observed.shape[0] - 1
    predicted = [observed[0]]
    tapes = []
    for i in range(1, k + 1):
        tape = integrate_forward(field.drift, predicted[-1], ((i - 1) * dt, i * dt), solver.tableau, solver.ctrl)
        tapes.append(tape)
        predicted.append(tape.y_end)
    mismatch = np.stack(predicted[1:]) - observed[1:]
    loss = float(np.sum(mismatch ** 2))

    residuals: List[Optional[np.ndarray]] = [None]
    if loss_spec.augmented:
        penalty = 0.0
        for i in range(1, k + 1):
            difference = (observed[i] - observed[i - 1]) / dt
            residual = field.drift(predicted[i - 1]) - difference
            residuals.append(residual)
            penalty += float(np.sum(residual ** 2))
        loss += loss_spec.omega * penalty
    return _GroupPass(observed, predicted, tapes, residuals, loss)


def _group_backward(field: MlpField, group: _GroupPass, loss_spec: LossSpec) -> ParamVector:
    k = len(group.tapes)
    omega = loss_spec.omega
    grad = np.zeros(field.n_params)
    p = 2.0 * (group.predicted[k] - group.observed[k])
    for i in range(k, 0, -1):
        p, contribution = adjoint_sweep(group.tapes[i - 1], field, p)
        grad += contribution
        if loss_spec.augmented:
            residual = group.residuals[i]
            grad += 2.0 * omega * field.drift_param_grad_apply(group.predicted[i - 1], residual)
        if i > 1:
            p = p + 2.0 * (group.predicted[i - 1] - group.observed[i - 1])
            if loss_spec.augmented:
                p = p + 2.0 * omega * field.drift_jacobian_transpose_apply(group.predicted[i - 1], residual)
    return grad


def _trajectory_objective(field: MlpField, states: np.ndarray, index: int, dt: float, loss_spec: LossSpec,
                          batch_len: int, solver: SolverSettings,
                          with_gradient: bool) -> Tuple[float, Optional[ParamVector]]:
    loss = 0.0
    grad = np.zeros(field.n_params) if with_gradient else None
    for observed in _segment_groups(states, batch_len):
        try:
            group = _group_forward(field, observed, dt, loss_spec, solver)
        except NumericError as e:
            raise type(e)(f"Trajectory {index}, batches of {observed.shape[0]} points: {e}") from e
        loss += group.loss
        if with_gradient:
            grad += _group_backward(field, group, loss_spec)
    return loss, grad


def _objective(field: MlpField, dataset: Dataset, loss_spec: LossSpec, batch_len: int,
               solver: Optional[SolverSettings], workers: int,
               with_gradient: bool) -> Tuple[float, Optional[ParamVector]]:
    if field.dim != dataset.dim:
        raise ConfigurationError(f"Field dimension {field.dim} does not match dataset dimension {dataset.dim}")
    solver = solver or SolverSettings()

    def run(index: int):
        return _trajectory_objective(field, dataset.trajectories[index].states, index, dataset.dt,
                                     loss_spec, batch_len, solver, with_gradient)

    if workers > 1 and dataset.m > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(dataset.m)))
    else:
        results = [run(index) for index in range(dataset.m)]

    loss = 0.0
    grad = np.zeros(field.n_params) if with_gradient else None
    for traj_loss, traj_grad in results:
        loss += traj_loss
        if with_gradient:
            grad += traj_grad
    return loss, grad


def loss_only(field: MlpField, dataset: Dataset, loss_spec: LossSpec = LossSpec(), batch_len: int = 2,
              solver: Optional[SolverSettings] = None, workers: int = 1) -> float:
    """Training loss J (or the augmented J~) over all trajectories and batches."""
    loss, _ = _objective(field, dataset, loss_spec, batch_len, solver, workers, with_gradient=False)
    return loss


def loss_and_gradient(field: MlpField, dataset: Dataset, loss_spec: LossSpec = LossSpec(), batch_len: int = 2,
                      solver: Optional[SolverSettings] = None,
                      workers: int = 1) -> Tuple[float, ParamVector]:
    """Loss and its exact discrete gradient with respect to the flat parameters."""
    return _objective(field, dataset, loss_spec, batch_len, solver, workers, with_gradient=True)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = 'adam'
    eta: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    K: int = 1000

    def __post_init__(self):
        if self.kind not in ('gd', 'adam'):
            raise ConfigurationError(f"Invalid optimizer: {self.kind!r}. Valid options are: gd, adam")
        if self.eta <= 0:
            raise ConfigurationError(f"Step size eta must be positive, got {self.eta}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("Adam moments must satisfy 0 <= beta < 1")
        if self.K < 0:
            raise ConfigurationError(f"Iteration budget K must be >= 0, got {self.K}")


@dataclass
class OptimizerState:
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def optimizer_step(params: ParamVector, grad: ParamVector, state: OptimizerState,
                   spec: OptimizerSpec) -> Tuple[ParamVector, OptimizerState]:
    """One update of plain gradient descent or bias-corrected Adam."""
    if params.shape != grad.shape:
        raise ConfigurationError(f"Parameter length {params.shape} does not match gradient length {grad.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("Gradient contains non-finite values")

    if spec.kind == 'gd':
        return params - spec.eta * grad, OptimizerState(step=state.step + 1)

    step = state.step + 1
    m = np.zeros_like(grad) if state.m is None else state.m
    v = np.zeros_like(grad) if state.v is None else state.v
    m = spec.beta1 * m + (1.0 - spec.beta1) * grad
    v = spec.beta2 * v + (1.0 - spec.beta2) * grad ** 2
    m_hat = m / (1.0 - spec.beta1 ** step)
    v_hat = v / (1.0 - spec.beta2 ** step)
    update = spec.eta * m_hat / (np.sqrt(v_hat) + spec.eps)
    return params - update, OptimizerState(step=step, m=m, v=v)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    dims: Tuple[int, ...]
    mode: str
    batch_len: int = 2
    loss: LossSpec = LossSpec()
    optimizer: OptimizerSpec = OptimizerSpec()
    solver: SolverSettings = field(default_factory=SolverSettings)
    seed: int = 0
    threshold: Optional[float] = None
    log_every: int = 100
    workers: int = 1
    check_invariant: bool = False

    def __post_init__(self):
        if self.batch_len < 2:
            raise ConfigurationError(f"batch_len must be >= 2, got {self.batch_len}")
        if self.log_every < 1:
            raise ConfigurationError(f"log_every must be >= 1, got {self.log_every}")

    def stop_threshold(self, dataset: Dataset) -> float:
        if self.threshold is not None:
            return self.threshold
        return 1e-8 * dataset.residual_points


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    loss: float
    grad_norm: float
    wall_ms: float


def spot_check_invariant(field: MlpField, dataset: Dataset, solver: SolverSettings, iteration: int,
                         seed: int = 0) -> float:
    """
    delta^T p drift on the first interval of one trajectory, with random
    terminal co-state and perturbation. The trajectory rotates with the
    iteration.
    """
    rng = np.random.default_rng((seed, iteration))
    states = dataset.trajectories[iteration % dataset.m].states
    tape = integrate_forward(field.drift, states[0], (0.0, dataset.dt), solver.tableau, solver.ctrl)
    drift = invariant_drift(tape, field, rng.normal(size=field.dim), rng.normal(size=field.dim))
    if drift > INVARIANT_TOLERANCE:
        logger.warning(f"Iteration {iteration}: delta^T p drift {drift:.3e} exceeds {INVARIANT_TOLERANCE:.0e}")
    else:
        logger.debug(f"Iteration {iteration}: delta^T p drift {drift:.3e}")
    return drift


def train(config: TrainConfig, dataset: Dataset,
          initial: Optional[MlpField] = None,
          callback: Optional[Callable[[HistoryEntry], None]] = None) -> Tuple[MlpField, List[HistoryEntry]]:
    """
    Fit the surrogate to the dataset.

    Runs ``config.optimizer.K`` iterations or stops once J falls to the
    threshold. Each history entry records J and the gradient norm at the
    parameters before that iteration's update.
    With ``config.check_invariant`` or DEBUG logging, every logged iteration
    also spot-checks delta^T p conservation on one interval.

    Raises:
        TrainingError: loss or gradient became non-finite (with the iteration index)
    """
    field = initial.copy() if initial is not None else init_field(config.dims, config.mode, config.seed)
    if field.dim != dataset.dim:
        raise ConfigurationError(f"Network input width {field.dim} does not match dataset dimension {dataset.dim}")
    history: List[HistoryEntry] = []
    threshold = config.stop_threshold(dataset)
    state = OptimizerState()
    params = field.get_params()
    check_invariant = config.check_invariant or logger.isEnabledFor(logging.DEBUG)
    started = time.perf_counter()

    logger.info(
        f"Training {config.mode} field {list(field.layer_dims)} ({field.n_params} parameters) on "
        f"{dataset.m} trajectories x {dataset.n} intervals, {config.optimizer.kind} for up to {config.optimizer.K} iterations"
    )

    for iteration in range(config.optimizer.K):
        try:
            loss, grad = loss_and_gradient(field, dataset, config.loss, config.batch_len,
                                           config.solver, config.workers)
        except NumericError as e:
            raise TrainingError(f"Iteration {iteration}: {e}", iteration) from e
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingError(f"Iteration {iteration}: non-finite loss or gradient (J={loss})", iteration)

        entry = HistoryEntry(iteration, loss, float(np.linalg.norm(grad)),
                             (time.perf_counter() - started) * 1000.0)
        history.append(entry)
        if callback is not None:
            callback(entry)
        if iteration % config.log_every == 0:
            logger.info(f"[{iteration}/{config.optimizer.K}] J={loss:.6e} |grad|={entry.grad_norm:.3e}")
            if check_invariant:
                spot_check_invariant(field, dataset, config.solver, iteration, config.seed)

        if loss <= threshold:
            logger.info(f"Reached J={loss:.3e} <= {threshold:.3e} at iteration {iteration}")
            break

        params, state = optimizer_step(params, grad, state, config.optimizer)
        field.set_params(params)
    else:
        if config.optimizer.K > 0:
            logger.warning(f"Iteration budget exhausted; last J={history[-1].loss:.6e} (threshold {threshold:.3e})")

    return field, history
