"""
Explicit Runge-Kutta integration with stage recording, and the backward
sweeps that run over a recorded tape.

The forward pass stores every stage state on a ForwardTape. The adjoint
sweep then walks the tape in reverse with the partitioned scheme whose
zero-weight stages use the modified weights b~_i = tau; the result is the
exact gradient of the discrete forward map. The variational sweep pushes
perturbations of the initial state forward through the same scheme, and
delta^T p is conserved between the two.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import BlowUpError, ConfigurationError, DivergenceError
from .field import MlpField, ParamVector

logger = logging.getLogger(__name__)

DriftFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ButcherTableau:
    """Coefficients of an explicit RK method, optionally with an embedded pair."""
    name: str
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int
    b_hat: Optional[np.ndarray] = None

    def __post_init__(self):
        s = self.b.shape[0]
        if self.a.shape != (s, s) or self.c.shape != (s,):
            raise ConfigurationError(f"Tableau {self.name}: inconsistent shapes a{self.a.shape}, b{self.b.shape}, c{self.c.shape}")
        if np.any(np.triu(self.a) != 0.0):
            raise ConfigurationError(f"Tableau {self.name} is not explicit (a_ij must vanish for j >= i)")
        if abs(self.b.sum() - 1.0) > 1e-12:
            raise ConfigurationError(f"Tableau {self.name}: weights sum to {self.b.sum()}, expected 1")
        if self.b_hat is not None and self.b_hat.shape != (s,):
            raise ConfigurationError(f"Tableau {self.name}: embedded weights have shape {self.b_hat.shape}")

    @property
    def s(self) -> int:
        return self.b.shape[0]

    @property
    def adaptive(self) -> bool:
        return self.b_hat is not None

    def adjoint_weights(self, tau: float) -> np.ndarray:
        """b~_i = b_i where b_i != 0, otherwise the step size tau."""
        return np.where(self.b != 0.0, self.b, tau)


def _tableau(name, a, b, c, order, b_hat=None) -> ButcherTableau:
    return ButcherTableau(
        name=name,
        a=np.array(a, dtype=np.float64),
        b=np.array(b, dtype=np.float64),
        c=np.array(c, dtype=np.float64),
        order=order,
        b_hat=None if b_hat is None else np.array(b_hat, dtype=np.float64),
    )


EULER = _tableau('euler', [[0.0]], [1.0], [0.0], order=1)

RK4 = _tableau(
    'rk4',
    [[0.0, 0.0, 0.0, 0.0],
     [0.5, 0.0, 0.0, 0.0],
     [0.0, 0.5, 0.0, 0.0],
     [0.0, 0.0, 1.0, 0.0]],
    [1 / 6, 1 / 3, 1 / 3, 1 / 6],
    [0.0, 0.5, 0.5, 1.0],
    order=4,
)

# Dormand-Prince 5(4); the last row of a repeats b (first same as last)
DOPRI5 = _tableau(
    'dopri5',
    [[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
     [1 / 5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
     [3 / 40, 9 / 40, 0.0, 0.0, 0.0, 0.0, 0.0],
     [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0, 0.0, 0.0],
     [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0, 0.0, 0.0],
     [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656, 0.0, 0.0],
     [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0]],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0],
    [0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0],
    order=5,
    b_hat=[5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40],
)

TABLEAUS = {t.name: t for t in (EULER, RK4, DOPRI5)}


def get_tableau(method: str) -> ButcherTableau:
    try:
        return TABLEAUS[method]
    except KeyError:
        raise ConfigurationError(f"Unknown integration method: {method!r}. Valid options are: {sorted(TABLEAUS)}")


@dataclass
class StepControl:
    """
    Step-size policy.

    Adaptive mode uses the embedded error estimate of the tableau; fixed mode
    takes equal steps of (about) ``h`` that land exactly on the span end.
    ``h_max`` of None means the length of the integrated interval.
    """
    mode: str = 'adaptive'
    rtol: float = 1e-6
    atol: float = 1e-8
    h: Optional[float] = None
    h_min: float = 1e-12
    h_max: Optional[float] = None
    safety: float = 0.9
    max_steps: int = 100_000

    def __post_init__(self):
        if self.mode not in ('adaptive', 'fixed'):
            raise ConfigurationError(f"Invalid step control mode: {self.mode!r}")
        if self.rtol <= 0 or self.atol <= 0:
            raise ConfigurationError("Tolerances must be positive")
        if self.mode == 'fixed' and (self.h is None or self.h <= 0):
            raise ConfigurationError("Fixed stepping needs a positive step size h")
        if self.h_max is not None and self.h_min > self.h_max:
            raise ConfigurationError("h_min must not exceed h_max")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be at least 1")

    @classmethod
    def fixed(cls, h: float) -> 'StepControl':
        return cls(mode='fixed', h=h)

    @classmethod
    def adaptive_tol(cls, rtol: float = 1e-6, atol: float = 1e-8) -> 'StepControl':
        return cls(mode='adaptive', rtol=rtol, atol=atol)


@dataclass
class StepRecord:
    t: float
    tau: float
    y: np.ndarray
    stages: np.ndarray  # shape (s,) + y.shape


@dataclass
class ForwardTape:
    """Accepted steps of one forward integration over [t_start, t_end]."""
    t_start: float
    t_end: float
    tableau: ButcherTableau
    y_start: np.ndarray
    y_end: np.ndarray
    steps: List[StepRecord] = field(default_factory=list)
    h_next: Optional[float] = None

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def times(self) -> List[float]:
        return [step.t for step in self.steps] + [self.t_end]

    def boundary_states(self) -> List[np.ndarray]:
        return [step.y for step in self.steps] + [self.y_end]

    def replay(self, drift_fn: DriftFn) -> List[np.ndarray]:
        """Recompute each step end from the stored stages."""
        return [_combine(step.y, step.tau, self.tableau.b, _stage_slopes(drift_fn, step.stages))
                for step in self.steps]


def _combine(y: np.ndarray, tau: float, weights: np.ndarray, slopes: np.ndarray) -> np.ndarray:
    return y + tau * np.tensordot(weights, slopes, axes=1)


def _stage_slopes(drift_fn: DriftFn, stages: np.ndarray) -> np.ndarray:
    return np.stack([drift_fn(stage) for stage in stages])


def _attempt(drift_fn: DriftFn, y: np.ndarray, tau: float,
             tableau: ButcherTableau) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Evaluate all stages of one step; None when a stage leaves the finite range."""
    s = tableau.s
    stages = np.empty((s,) + y.shape)
    slopes = np.empty((s,) + y.shape)
    for i in range(s):
        if i == 0:
            stage = y
        else:
            stage = y + tau * np.tensordot(tableau.a[i, :i], slopes[:i], axes=1)
        if not np.all(np.isfinite(stage)):
            return None
        stages[i] = stage
        slopes[i] = drift_fn(stage)
        if not np.all(np.isfinite(slopes[i])):
            return None
    return stages, slopes


def integrate_forward(drift_fn: DriftFn, y0, span: Sequence[float],
                      tableau: ButcherTableau = DOPRI5,
                      ctrl: Optional[StepControl] = None,
                      h0: Optional[float] = None) -> ForwardTape:
    """
    Integrate y' = drift(y) over ``span`` and record every accepted step.

    Args:
        drift_fn: Right-hand side, accepting states of shape (..., d)
        y0: Initial state, shape (d,) or stacked (B, d)
        span: (t_a, t_b) with t_b > t_a
        tableau: RK coefficients
        ctrl: Step-size policy (adaptive Dormand-Prince defaults)
        h0: Initial step guess for adaptive mode

    Returns:
        ForwardTape whose final step lands exactly on t_b
    """
    ctrl = ctrl or StepControl()
    t_a, t_b = float(span[0]), float(span[1])
    if not t_b > t_a:
        raise ConfigurationError(f"Integration span must satisfy t_b > t_a, got [{t_a}, {t_b}]")
    y = np.array(y0, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise BlowUpError("Initial state contains non-finite values")

    if ctrl.mode == 'fixed':
        return _integrate_fixed_steps(drift_fn, y, t_a, t_b, tableau, ctrl.h)
    if not tableau.adaptive:
        raise ConfigurationError(f"Tableau {tableau.name} has no embedded pair for adaptive stepping")
    return _integrate_adaptive(drift_fn, y, t_a, t_b, tableau, ctrl, h0)


def _integrate_fixed_steps(drift_fn: DriftFn, y: np.ndarray, t_a: float, t_b: float,
                           tableau: ButcherTableau, h: float) -> ForwardTape:
    length = t_b - t_a
    n = int(round(length / h))
    if n < 1 or abs(n * h - length) > 1e-9 * length:
        raise ConfigurationError(f"Step size h={h} does not divide the span length {length}")
    tape = ForwardTape(t_start=t_a, t_end=t_b, tableau=tableau, y_start=y.copy(), y_end=y)
    t = t_a
    for l in range(n):
        t_next = t_b if l == n - 1 else t_a + (l + 1) * (length / n)
        tau = t_next - t
        result = _attempt(drift_fn, y, tau, tableau)
        if result is None:
            raise BlowUpError(f"Non-finite state at t={t:.6g} (fixed step {tau:.3g}, {tableau.name})")
        stages, slopes = result
        y_next = _combine(y, tau, tableau.b, slopes)
        if not np.all(np.isfinite(y_next)):
            raise BlowUpError(f"Non-finite state at t={t_next:.6g} (fixed step {tau:.3g}, {tableau.name})")
        tape.steps.append(StepRecord(t=t, tau=tau, y=y, stages=stages))
        y, t = y_next, t_next
    tape.y_end = y
    tape.h_next = length / n
    return tape


def _integrate_adaptive(drift_fn: DriftFn, y: np.ndarray, t_a: float, t_b: float,
                        tableau: ButcherTableau, ctrl: StepControl,
                        h0: Optional[float]) -> ForwardTape:
    length = t_b - t_a
    h_max = ctrl.h_max if ctrl.h_max is not None else length
    h = min(h0 if h0 is not None else h_max, h_max)
    error_weights = tableau.b - tableau.b_hat
    exponent = -1.0 / (min(tableau.order, 5))
    tape = ForwardTape(t_start=t_a, t_end=t_b, tableau=tableau, y_start=y.copy(), y_end=y)
    t = t_a
    attempts = 0

    while t < t_b:
        attempts += 1
        if attempts > ctrl.max_steps:
            raise DivergenceError(f"Exceeded {ctrl.max_steps} step attempts at t={t:.6g} of [{t_a}, {t_b}]")

        last = t + h >= t_b - 1e-14 * max(1.0, abs(t_b))
        tau = t_b - t if last else h
        result = _attempt(drift_fn, y, tau, tableau)
        if result is None:
            err = np.inf
        else:
            stages, slopes = result
            y_next = _combine(y, tau, tableau.b, slopes)
            estimate = tau * np.tensordot(error_weights, slopes, axes=1)
            scale = ctrl.atol + ctrl.rtol * np.maximum(np.abs(y), np.abs(y_next))
            err = float(np.sqrt(np.mean((estimate / scale) ** 2)))
            if not np.isfinite(err):
                err = np.inf

        if err <= 1.0:
            tape.steps.append(StepRecord(t=t, tau=tau, y=y, stages=stages))
            y = y_next
            t = t_b if last else t + tau
            factor = 5.0 if err == 0.0 else min(5.0, max(0.2, ctrl.safety * err ** exponent))
            h = min(h_max, tau * factor) if not last else h
        else:
            factor = 0.2 if not np.isfinite(err) else max(0.2, ctrl.safety * err ** exponent)
            h = tau * factor
            logger.debug(f"Rejected step {tau:.3e} at t={t:.6g} (err={err:.3e})")
            if h < ctrl.h_min:
                if result is None:
                    raise BlowUpError(f"Non-finite state near t={t:.6g}; step size collapsed below {ctrl.h_min}")
                raise DivergenceError(f"Step size {h:.3e} forced below h_min={ctrl.h_min} at t={t:.6g}")

    tape.y_end = y
    tape.h_next = h
    return tape


def integrate_fixed(drift_fn: DriftFn, y0, span: Sequence[float], method: str, h: float) -> ForwardTape:
    """Fixed-step integration with a named method (euler, rk4 or dopri5)."""
    return integrate_forward(drift_fn, y0, span, get_tableau(method), StepControl.fixed(h))


def integrate_through(drift_fn: DriftFn, y0, times: Sequence[float],
                      tableau: ButcherTableau = DOPRI5,
                      ctrl: Optional[StepControl] = None) -> List[ForwardTape]:
    """One tape per observation interval; every time in ``times`` is hit exactly."""
    if len(times) < 2:
        raise ConfigurationError("Need at least two observation times")
    tapes = []
    y = np.asarray(y0, dtype=np.float64)
    h_guess = None
    for t_a, t_b in zip(times[:-1], times[1:]):
        tape = integrate_forward(drift_fn, y, (t_a, t_b), tableau, ctrl, h0=h_guess)
        tapes.append(tape)
        y = tape.y_end
        h_guess = tape.h_next
    return tapes


def observed_states(tapes: List[ForwardTape]) -> np.ndarray:
    """States at the observation times covered by consecutive tapes."""
    return np.stack([tapes[0].y_start] + [tape.y_end for tape in tapes])


def _check_tape_field(tape: ForwardTape, field: MlpField, vector: np.ndarray, name: str):
    if tape.y_end.shape[-1] != field.dim:
        raise ConfigurationError(f"Tape state dimension {tape.y_end.shape[-1]} does not match field dimension {field.dim}")
    if vector.shape[-1] != field.dim:
        raise ConfigurationError(f"{name} has dimension {vector.shape[-1]}, expected {field.dim}")


def adjoint_states(tape: ForwardTape, field: MlpField, p_end) -> Tuple[List[np.ndarray], ParamVector]:
    """
    Backward partitioned-RK sweep over a tape.

    Args:
        tape: Forward tape recorded with ``field.drift``
        field: The surrogate whose drift produced the tape
        p_end: Co-state at the end of the tape, same shape as the tape states

    Returns:
        (co-states at every step boundary from t_start to t_end, parameter gradient)
    """
    p = np.array(p_end, dtype=np.float64)
    _check_tape_field(tape, field, p, 'p_end')
    if p.shape != tape.y_end.shape:
        raise ConfigurationError(f"p_end shape {p.shape} does not match tape state shape {tape.y_end.shape}")

    tableau = tape.tableau
    a, b, s = tableau.a, tableau.b, tableau.s
    grad = np.zeros(field.n_params)
    history = [p]

    for step in reversed(tape.steps):
        tau = step.tau
        b_tilde = tableau.adjoint_weights(tau)
        pulled = [None] * s
        for i in range(s - 1, -1, -1):
            acc = np.zeros_like(p)
            for j in range(i + 1, s):
                if a[j, i] != 0.0:
                    acc = acc + (b_tilde[j] * a[j, i]) * pulled[j]
            if b[i] != 0.0:
                stage_p = p + (tau / b[i]) * acc
            else:
                stage_p = acc
            pulled[i] = field.drift_jacobian_transpose_apply(step.stages[i], stage_p)
            grad += (tau * b_tilde[i]) * field.drift_param_grad_apply(step.stages[i], stage_p)
        p = p + tau * np.tensordot(b_tilde, np.stack(pulled), axes=1)
        history.append(p)

    history.reverse()
    return history, grad


def adjoint_sweep(tape: ForwardTape, field: MlpField, p_end) -> Tuple[np.ndarray, ParamVector]:
    """Co-state at the start of the tape and the tape's gradient contribution."""
    history, grad = adjoint_states(tape, field, p_end)
    return history[0], grad


def variational_sweep(tape: ForwardTape, field: MlpField, delta0) -> List[np.ndarray]:
    """
    Propagate perturbations of the initial state through the recorded scheme.

    ``delta0`` is either a state-shaped vector or, for an unbatched tape, a
    d x d matrix whose columns are directions. Returns delta at every step
    boundary (same layout as ``delta0``).
    """
    delta = np.array(delta0, dtype=np.float64)
    _check_tape_field(tape, field, delta, 'delta0')
    state_shape = tape.y_end.shape
    columns = False
    if delta.shape == state_shape:
        rows = delta
    elif len(state_shape) == 1 and delta.shape == (field.dim, field.dim):
        rows = delta.T.copy()
        columns = True
    else:
        raise ConfigurationError(f"delta0 shape {delta.shape} does not fit tape state shape {state_shape}")

    tableau = tape.tableau
    history = [rows]
    for step in tape.steps:
        tau = step.tau
        slopes = []
        for i in range(tableau.s):
            stage_delta = rows
            for j in range(i):
                if tableau.a[i, j] != 0.0:
                    stage_delta = stage_delta + (tau * tableau.a[i, j]) * slopes[j]
            slopes.append(field.drift_jacobian_apply(step.stages[i], stage_delta))
        rows = _combine(rows, tau, tableau.b, np.stack(slopes))
        history.append(rows)

    if columns:
        return [r.T for r in history]
    return history


INVARIANT_TOLERANCE = 1e-10


def _bilinear(delta: np.ndarray, p: np.ndarray) -> np.ndarray:
    if delta.ndim == 2 and p.ndim == 1:
        return delta.T @ p
    return np.sum(delta * p, axis=-1)


def invariant_drift(tape: ForwardTape, field: MlpField, p_end, delta0) -> float:
    """Largest change of delta^T p over the tape, relative to max(1, |delta_0^T p_0|)."""
    deltas = variational_sweep(tape, field, delta0)
    costates, _ = adjoint_states(tape, field, p_end)
    values = [_bilinear(delta, p) for delta, p in zip(deltas, costates)]
    start = values[0]
    drift = max(float(np.max(np.abs(value - start))) for value in values)
    return drift / max(1.0, float(np.max(np.abs(start))))
