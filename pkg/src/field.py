"""
Neural surrogate for the unknown vector field.

A fully connected tanh network G(y, theta). In scalar mode G is a potential
and the learned dynamics are y' = -dG/dy; in vector mode G itself is the
drift. The derivative operators needed by the adjoint equations are computed
by explicit forward/reverse propagation through the layers.

All operations accept states with leading batch axes ``(..., d)``.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

from .errors import ConfigurationError, ModeError, NumericInputError

logger = logging.getLogger(__name__)

# Flat parameter vector: layer-major, weights row-major then biases
ParamVector = NDArray[np.float64]

SCALAR = 'scalar'
VECTOR = 'vector'


def validate_dims(layer_dims: Sequence[int], mode: str) -> Tuple[int, ...]:
    """Check layer widths against the field mode and return them as a tuple."""
    if mode not in (SCALAR, VECTOR):
        raise ConfigurationError(f"Invalid field mode: {mode!r}. Valid options are: {SCALAR}, {VECTOR}")
    dims = tuple(int(n) for n in layer_dims)
    if len(dims) < 2:
        raise ConfigurationError(f"Need at least 2 layers (input and output), got {list(dims)}")
    if any(n <= 0 for n in dims):
        raise ConfigurationError(f"Layer widths must be positive, got {list(dims)}")
    if mode == SCALAR and dims[-1] != 1:
        raise ConfigurationError(f"Scalar-potential mode needs output width 1, got {dims[-1]}")
    if mode == VECTOR and dims[-1] != dims[0]:
        raise ConfigurationError(f"Vector-field mode needs output width {dims[0]}, got {dims[-1]}")
    return dims


def param_count(layer_dims: Sequence[int]) -> int:
    return sum((n_in + 1) * n_out for n_in, n_out in zip(layer_dims[:-1], layer_dims[1:]))


class MlpField:
    """
    Tanh multilayer perceptron with a linear output layer.

    Weights are stored as ``W_j`` of shape (N_j, N_{j+1}) acting on row
    vectors, so a layer computes ``h @ W_j + b_j``.
    """

    def __init__(self, layer_dims: Sequence[int], mode: str,
                 weights: List[np.ndarray], biases: List[np.ndarray]):
        self.layer_dims = validate_dims(layer_dims, mode)
        self.mode = mode
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self._check_shapes()

    def _check_shapes(self):
        expected = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ConfigurationError(
                f"Expected {len(expected)} weight layers for dims {list(self.layer_dims)}, "
                f"got {len(self.weights)} weights and {len(self.biases)} biases"
            )
        for j, (n_in, n_out) in enumerate(expected):
            if self.weights[j].shape != (n_in, n_out) or self.biases[j].shape != (n_out,):
                raise ConfigurationError(
                    f"Layer {j}: expected W {(n_in, n_out)} and b {(n_out,)}, "
                    f"got {self.weights[j].shape} and {self.biases[j].shape}"
                )

    @property
    def dim(self) -> int:
        return self.layer_dims[0]

    @property
    def n_params(self) -> int:
        return param_count(self.layer_dims)

    def copy(self) -> 'MlpField':
        return MlpField(self.layer_dims, self.mode,
                        [w.copy() for w in self.weights], [b.copy() for b in self.biases])

    # ------------------------------------------------------------------
    # Parameter plumbing
    # ------------------------------------------------------------------

    def get_params(self) -> ParamVector:
        """Flatten parameters: per layer, W row-major followed by b."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, params: ParamVector) -> 'MlpField':
        """Restore parameters from a flat vector in place and return the field."""
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 1 or params.shape[0] != self.n_params:
            raise ConfigurationError(
                f"Parameter vector length {params.size} does not match field size {self.n_params}"
            )
        if not np.all(np.isfinite(params)):
            raise NumericInputError("Parameter vector contains non-finite values")
        self.weights, self.biases = self._unflatten(params)
        return self

    def _unflatten(self, flat: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        weights, biases = [], []
        offset = 0
        for n_in, n_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            weights.append(flat[offset:offset + n_in * n_out].reshape(n_in, n_out).copy())
            offset += n_in * n_out
            biases.append(flat[offset:offset + n_out].copy())
            offset += n_out
        return weights, biases

    def _flatten_grads(self, grad_w: List[np.ndarray], grad_b: List[np.ndarray]) -> ParamVector:
        parts = []
        for gw, gb in zip(grad_w, grad_b):
            parts.append(gw.ravel())
            parts.append(gb)
        return np.concatenate(parts)

    # ------------------------------------------------------------------
    # Propagation helpers (inputs flattened to (B, d))
    # ------------------------------------------------------------------

    def _prepare(self, y, name: str = 'y') -> Tuple[np.ndarray, Tuple[int, ...]]:
        arr = np.asarray(y, dtype=np.float64)
        if arr.ndim == 0 or arr.shape[-1] != self.dim:
            raise ConfigurationError(f"{name} must have trailing dimension {self.dim}, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericInputError(f"{name} contains non-finite values")
        return arr.reshape(-1, self.dim), arr.shape[:-1]

    def _prepare_pair(self, y, v) -> Tuple[np.ndarray, np.ndarray, Tuple[int, ...]]:
        y_arr = np.asarray(y, dtype=np.float64)
        v_arr = np.asarray(v, dtype=np.float64)
        try:
            y_arr, v_arr = np.broadcast_arrays(y_arr, v_arr)
        except ValueError:
            raise ConfigurationError(f"Cannot pair state shape {y_arr.shape} with direction shape {v_arr.shape}")
        y2, batch = self._prepare(y_arr, 'y')
        v2, _ = self._prepare(v_arr, 'v')
        return y2, v2, batch

    def _forward(self, y2: np.ndarray) -> Tuple[List[np.ndarray], np.ndarray]:
        hs = [y2]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            hs.append(np.tanh(hs[-1] @ w + b))
        out = hs[-1] @ self.weights[-1] + self.biases[-1]
        return hs, out

    def _tangent(self, hs: List[np.ndarray], v2: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray], np.ndarray]:
        """Forward-mode tangents of hidden states along direction v."""
        dhs = [v2]
        das = [None]
        for k in range(1, len(hs)):
            da = dhs[k - 1] @ self.weights[k - 1]
            das.append(da)
            dhs.append((1.0 - hs[k] ** 2) * da)
        dout = dhs[-1] @ self.weights[-1]
        return dhs, das, dout

    def _input_cotangent(self, hs: List[np.ndarray], c: np.ndarray) -> np.ndarray:
        """Reverse-mode pull-back of an output cotangent c to the input."""
        r = c @ self.weights[-1].T
        for k in range(len(hs) - 1, 0, -1):
            s = r * (1.0 - hs[k] ** 2)
            r = s @ self.weights[k - 1].T
        return r

    def _hessian_apply(self, hs: List[np.ndarray], v2: np.ndarray) -> np.ndarray:
        """Exact d^2G/dy^2 v by differentiating the reverse sweep along v (scalar mode)."""
        dhs, _, _ = self._tangent(hs, v2)
        r = np.broadcast_to(self.weights[-1].T, (hs[0].shape[0], self.weights[-1].shape[0]))
        dr = np.zeros_like(r)
        for k in range(len(hs) - 1, 0, -1):
            sig = 1.0 - hs[k] ** 2
            s = r * sig
            ds = dr * sig - 2.0 * r * hs[k] * dhs[k]
            r = s @ self.weights[k - 1].T
            dr = ds @ self.weights[k - 1].T
        return dr

    # ------------------------------------------------------------------
    # Public operators
    # ------------------------------------------------------------------

    def potential(self, y) -> np.ndarray:
        """G(y, theta); scalar mode only."""
        if self.mode != SCALAR:
            raise ModeError("potential() is only defined for scalar-potential fields")
        y2, batch = self._prepare(y)
        _, out = self._forward(y2)
        return out[:, 0].reshape(batch)

    def drift(self, y) -> np.ndarray:
        """Learned right-hand side: -dG/dy (scalar mode) or G (vector mode)."""
        y2, batch = self._prepare(y)
        hs, out = self._forward(y2)
        if self.mode == SCALAR:
            result = -self._input_cotangent(hs, np.ones((y2.shape[0], 1)))
        else:
            result = out
        return result.reshape(batch + (self.dim,))

    def __call__(self, y) -> np.ndarray:
        return self.drift(y)

    def drift_jacobian_transpose_apply(self, y, v) -> np.ndarray:
        """(d drift / dy)^T v. In scalar mode this is -(d^2G/dy^2) v."""
        y2, v2, batch = self._prepare_pair(y, v)
        hs, _ = self._forward(y2)
        if self.mode == SCALAR:
            result = -self._hessian_apply(hs, v2)
        else:
            result = self._input_cotangent(hs, v2)
        return result.reshape(batch + (self.dim,))

    def drift_jacobian_apply(self, y, v) -> np.ndarray:
        """(d drift / dy) v, the linearized dynamics used by the variational sweep."""
        y2, v2, batch = self._prepare_pair(y, v)
        hs, _ = self._forward(y2)
        if self.mode == SCALAR:
            result = -self._hessian_apply(hs, v2)
        else:
            _, _, result = self._tangent(hs, v2)
        return result.reshape(batch + (self.dim,))

    def drift_param_grad_apply(self, y, v) -> ParamVector:
        """
        (d drift / d theta)^T v, summed over any batch axes.

        Scalar mode differentiates <dG/dy, v> with respect to theta by running
        the reverse sweep over the forward-tangent program.
        """
        y2, v2, _ = self._prepare_pair(y, v)
        hs, _ = self._forward(y2)
        n_layers = len(self.weights)
        grad_w: List[Optional[np.ndarray]] = [None] * n_layers
        grad_b: List[Optional[np.ndarray]] = [None] * n_layers

        if self.mode == VECTOR:
            grad_w[-1] = hs[-1].T @ v2
            grad_b[-1] = v2.sum(axis=0)
            r = v2 @ self.weights[-1].T
            for k in range(n_layers - 1, 0, -1):
                s = r * (1.0 - hs[k] ** 2)
                grad_w[k - 1] = hs[k - 1].T @ s
                grad_b[k - 1] = s.sum(axis=0)
                r = s @ self.weights[k - 1].T
            return self._flatten_grads(grad_w, grad_b)

        dhs, das, _ = self._tangent(hs, v2)
        ones = np.ones((y2.shape[0], 1))
        grad_w[-1] = dhs[-1].T @ ones
        grad_b[-1] = np.zeros_like(self.biases[-1])
        dh_bar = ones @ self.weights[-1].T
        h_bar = np.zeros_like(hs[-1])
        for k in range(n_layers - 1, 0, -1):
            sig = 1.0 - hs[k] ** 2
            da_bar = dh_bar * sig
            h_bar = h_bar - 2.0 * hs[k] * dh_bar * das[k]
            a_bar = h_bar * sig
            grad_w[k - 1] = dhs[k - 1].T @ da_bar + hs[k - 1].T @ a_bar
            grad_b[k - 1] = a_bar.sum(axis=0)
            dh_bar = da_bar @ self.weights[k - 1].T
            h_bar = a_bar @ self.weights[k - 1].T
        return -self._flatten_grads(grad_w, grad_b)

    # ------------------------------------------------------------------
    # Checkpoint documents
    # ------------------------------------------------------------------

    def to_document(self) -> dict:
        return {
            'layer_dims': list(self.layer_dims),
            'mode': self.mode,
            'params': self.get_params().tolist(),
        }

    @classmethod
    def from_document(cls, document: dict) -> 'MlpField':
        if not isinstance(document, dict):
            raise ConfigurationError(f"Checkpoint must be a JSON object, got {type(document).__name__}")
        missing = {'layer_dims', 'mode', 'params'} - set(document)
        if missing:
            raise ConfigurationError(f"Checkpoint is missing keys: {sorted(missing)}")
        dims = validate_dims(document['layer_dims'], document['mode'])
        field = cls(dims, document['mode'],
                    [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
                    [np.zeros(b) for b in dims[1:]])
        try:
            params = np.asarray(document['params'], dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f"Checkpoint params must be numbers: {e}") from e
        return field.set_params(params)


def init_field(layer_dims: Sequence[int], mode: str, seed: int) -> MlpField:
    """
    Gaussian weights with standard deviation 1/sqrt(fan-in), zero biases.

    Deterministic given the seed.
    """
    dims = validate_dims(layer_dims, mode)
    rng = np.random.default_rng(seed)
    weights = [rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))
               for n_in, n_out in zip(dims[:-1], dims[1:])]
    biases = [np.zeros(n_out) for n_out in dims[1:]]
    logger.debug(f"Initialized {mode} field {list(dims)} with {param_count(dims)} parameters (seed {seed})")
    return MlpField(dims, mode, weights, biases)
