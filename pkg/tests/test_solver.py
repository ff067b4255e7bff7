import unittest

import numpy as np

from src.errors import BlowUpError, ConfigurationError, DivergenceError
from src.field import MlpField, init_field
from src.solver import (
    DOPRI5, EULER, RK4, ButcherTableau, StepControl, adjoint_states, adjoint_sweep, get_tableau,
    integrate_fixed, integrate_forward, integrate_through, observed_states, variational_sweep,
)
from src.systems import get_system


def decay(y):
    return -y


def linear_net(w) -> MlpField:
    w = np.asarray(w, dtype=np.float64)
    return MlpField([w.size, 1], 'scalar', [w.reshape(-1, 1)], [np.zeros(1)])


def fixed_error(method: str, h: float) -> float:
    tape = integrate_fixed(decay, np.array([1.0]), (0.0, 1.0), method, h)
    return abs(float(tape.y_end[0]) - np.exp(-1.0))


class TestTableaus(unittest.TestCase):

    def test_presets(self):
        self.assertIs(get_tableau('dopri5'), DOPRI5)
        self.assertEqual(DOPRI5.s, 7)
        self.assertTrue(DOPRI5.adaptive)
        self.assertFalse(RK4.adaptive)
        self.assertAlmostEqual(float(np.sum(DOPRI5.b_hat)), 1.0, places=14)
        for tableau in (EULER, RK4, DOPRI5):
            np.testing.assert_allclose(tableau.a.sum(axis=1), tableau.c, atol=1e-13)

    def test_unknown_method(self):
        with self.assertRaises(ConfigurationError):
            get_tableau('rk45')

    def test_implicit_tableau_rejected(self):
        with self.assertRaises(ConfigurationError):
            ButcherTableau('bad', np.array([[0.5]]), np.array([1.0]), np.array([0.5]), order=1)

    def test_adjoint_weights_replace_zero_weights(self):
        weights = DOPRI5.adjoint_weights(0.01)
        zero = DOPRI5.b == 0.0
        self.assertTrue(np.any(zero))
        np.testing.assert_array_equal(weights[zero], 0.01)
        np.testing.assert_array_equal(weights[~zero], DOPRI5.b[~zero])


class TestIntegrateForward(unittest.TestCase):

    def test_zero_drift_single_step(self):
        y0 = np.array([1.5, -2.0])
        tape = integrate_forward(lambda y: np.zeros_like(y), y0, (0.0, 3.0))
        np.testing.assert_array_equal(tape.y_end, y0)
        self.assertEqual(tape.n_steps, 1)

    def test_one_dopri5_step_of_decay(self):
        tape = integrate_forward(decay, np.array([1.0]), (0.0, 0.1), DOPRI5, StepControl.fixed(0.1))
        self.assertLessEqual(abs(float(tape.y_end[0]) - np.exp(-0.1)), 1e-9)
        self.assertAlmostEqual(float(tape.y_end[0]), 0.9048374, places=7)

    def test_linear_gradient_flow_adaptive(self):
        drift = get_system('linear-gf').drift
        tape = integrate_forward(drift, np.array([1.0, 0.0]), (0.0, 1.0), DOPRI5,
                                 StepControl.adaptive_tol(1e-10, 1e-12))
        exact = 0.5 * np.exp(-3.0) * np.array([1.0, 1.0]) + 0.5 * np.exp(-1.0) * np.array([1.0, -1.0])
        np.testing.assert_allclose(tape.y_end, exact, atol=1e-8)
        self.assertAlmostEqual(float(tape.y_end[0]), 0.20883, places=5)
        self.assertAlmostEqual(float(tape.y_end[1]), -0.15905, places=5)
        self.assertEqual(tape.times()[-1], 1.0)

    def test_euler_step_on_linear_gf(self):
        tape = integrate_fixed(get_system('linear-gf').drift, np.array([1.0, 0.0]), (0.0, 0.05), 'euler', 0.05)
        np.testing.assert_allclose(tape.y_end, [0.9, -0.05], atol=1e-15)

    def test_rk4_order(self):
        ratio = fixed_error('rk4', 0.1) / fixed_error('rk4', 0.05)
        self.assertGreater(ratio, 14.0)
        self.assertLess(ratio, 18.0)

    def test_dopri5_order(self):
        ratio = fixed_error('dopri5', 0.1) / fixed_error('dopri5', 0.05)
        self.assertGreater(ratio, 26.0)
        self.assertLess(ratio, 38.0)

    def test_dopri5_log_log_slope(self):
        hs = np.array([0.1, 0.05, 0.025])
        errors = np.array([fixed_error('dopri5', h) for h in hs])
        slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
        self.assertAlmostEqual(slope, 5.0, delta=0.3)

    def test_fixed_step_must_divide_span(self):
        with self.assertRaises(ConfigurationError):
            integrate_fixed(decay, np.array([1.0]), (0.0, 1.0), 'rk4', 0.3)

    def test_adaptive_needs_embedded_pair(self):
        with self.assertRaises(ConfigurationError):
            integrate_forward(decay, np.array([1.0]), (0.0, 1.0), RK4, StepControl())

    def test_bad_span(self):
        with self.assertRaises(ConfigurationError):
            integrate_forward(decay, np.array([1.0]), (1.0, 1.0))

    def test_blow_up_fixed(self):
        with self.assertRaises(BlowUpError):
            integrate_fixed(lambda y: y ** 2, np.array([1.0]), (0.0, 10.0), 'euler', 0.5)

    def test_step_budget(self):
        ctrl = StepControl(mode='adaptive', rtol=1e-12, atol=1e-14, max_steps=3)
        with self.assertRaises(DivergenceError):
            integrate_forward(lambda y: np.cos(10 * y), np.array([0.1]), (0.0, 10.0), DOPRI5, ctrl)

    def test_replay_matches_recorded_steps(self):
        field = init_field([2, 8, 1], 'scalar', seed=3)
        tape = integrate_forward(field.drift, np.array([0.2, -0.1]), (0.0, 0.5))
        replayed = tape.replay(field.drift)
        for recorded, again in zip(tape.boundary_states()[1:], replayed):
            np.testing.assert_array_equal(recorded, again)

    def test_stacked_states(self):
        y0 = np.array([[1.0], [2.0], [-0.5]])
        tape = integrate_fixed(decay, y0, (0.0, 1.0), 'dopri5', 0.1)
        np.testing.assert_allclose(tape.y_end[:, 0], y0[:, 0] * np.exp(-1.0), rtol=1e-8)

    def test_integrate_through_hits_observation_times(self):
        times = np.arange(6) * 0.2
        tapes = integrate_through(decay, np.array([1.0]), times, DOPRI5, StepControl.adaptive_tol(1e-10, 1e-12))
        self.assertEqual(len(tapes), 5)
        for tape, t_b in zip(tapes, times[1:]):
            self.assertEqual(tape.t_end, t_b)
        np.testing.assert_allclose(observed_states(tapes)[:, 0], np.exp(-times), atol=1e-9)


class TestAdjoint(unittest.TestCase):

    def setUp(self):
        self.rng = np.random.default_rng(2024)

    def test_zero_costate(self):
        field = init_field([2, 8, 1], 'scalar', seed=0)
        tape = integrate_fixed(field.drift, np.array([0.3, 0.1]), (0.0, 0.2), 'dopri5', 0.05)
        p_start, grad = adjoint_sweep(tape, field, np.zeros(2))
        np.testing.assert_array_equal(p_start, 0.0)
        np.testing.assert_array_equal(grad, 0.0)

    def test_linear_net(self):
        field = linear_net([1.0, -2.0])
        tape = integrate_fixed(field.drift, np.array([0.3, 0.1]), (0.0, 0.5), 'dopri5', 0.1)
        p_end = np.array([0.7, -1.3])
        p_start, grad = adjoint_sweep(tape, field, p_end)
        np.testing.assert_allclose(p_start, p_end, atol=1e-15)
        np.testing.assert_allclose(grad[:2], -0.5 * p_end, atol=1e-14)
        self.assertEqual(grad[2], 0.0)

    def test_one_step_gradient_matches_fd(self):
        field = init_field([2, 8, 1], 'scalar', seed=5)
        y0 = np.array([0.4, -0.3])
        p_end = np.array([1.0, 0.0])
        tape = integrate_fixed(field.drift, y0, (0.0, 0.1), 'dopri5', 0.1)
        _, grad = adjoint_sweep(tape, field, p_end)

        perturbed = field.copy()
        theta = field.get_params()
        eps = 1e-5
        fd = np.empty_like(theta)
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = eps
            plus = integrate_fixed(perturbed.set_params(theta + e).drift, y0, (0.0, 0.1), 'dopri5', 0.1).y_end
            minus = integrate_fixed(perturbed.set_params(theta - e).drift, y0, (0.0, 0.1), 'dopri5', 0.1).y_end
            fd[k] = (plus - minus) @ p_end / (2 * eps)
        self.assertLessEqual(np.abs(grad - fd).max() / np.abs(fd).max(), 1e-7)

    def test_multi_step_gradient_matches_fd_vector_mode(self):
        field = init_field([2, 6, 2], 'vector', seed=1)
        y0 = np.array([0.1, 0.8])
        p_end = np.array([0.3, -0.6])
        tape = integrate_fixed(field.drift, y0, (0.0, 0.4), 'rk4', 0.1)
        _, grad = adjoint_sweep(tape, field, p_end)
        perturbed = field.copy()
        theta = field.get_params()
        eps = 1e-5
        fd = np.empty_like(theta)
        for k in range(theta.size):
            e = np.zeros_like(theta)
            e[k] = eps
            plus = integrate_fixed(perturbed.set_params(theta + e).drift, y0, (0.0, 0.4), 'rk4', 0.1).y_end
            minus = integrate_fixed(perturbed.set_params(theta - e).drift, y0, (0.0, 0.4), 'rk4', 0.1).y_end
            fd[k] = (plus - minus) @ p_end / (2 * eps)
        self.assertLessEqual(np.abs(grad - fd).max() / np.abs(fd).max(), 1e-7)

    def test_costate_is_state_sensitivity(self):
        field = init_field([2, 8, 1], 'scalar', seed=6)
        y0 = np.array([0.2, 0.5])
        p_end = np.array([0.5, 1.0])
        tape = integrate_fixed(field.drift, y0, (0.0, 0.3), 'dopri5', 0.1)
        p_start, _ = adjoint_sweep(tape, field, p_end)
        eps = 1e-5
        fd = []
        for e in np.eye(2) * eps:
            plus = integrate_fixed(field.drift, y0 + e, (0.0, 0.3), 'dopri5', 0.1).y_end
            minus = integrate_fixed(field.drift, y0 - e, (0.0, 0.3), 'dopri5', 0.1).y_end
            fd.append((plus - minus) @ p_end / (2 * eps))
        np.testing.assert_allclose(p_start, fd, rtol=1e-7)

    def test_adjoint_states_boundaries(self):
        field = init_field([2, 8, 1], 'scalar', seed=2)
        tape = integrate_fixed(field.drift, np.array([0.1, 0.1]), (0.0, 0.2), 'dopri5', 0.05)
        history, _ = adjoint_states(tape, field, np.array([1.0, 1.0]))
        self.assertEqual(len(history), tape.n_steps + 1)
        np.testing.assert_array_equal(history[-1], [1.0, 1.0])

    def test_dimension_mismatch(self):
        field = init_field([2, 8, 1], 'scalar', seed=2)
        tape = integrate_fixed(field.drift, np.array([0.1, 0.1]), (0.0, 0.2), 'dopri5', 0.05)
        with self.assertRaises(ConfigurationError):
            adjoint_sweep(tape, field, np.array([1.0, 1.0, 1.0]))


class TestVariational(unittest.TestCase):

    def test_linear_net_keeps_delta(self):
        field = linear_net([1.0, 0.5])
        tape = integrate_fixed(field.drift, np.array([0.0, 0.0]), (0.0, 0.3), 'rk4', 0.1)
        deltas = variational_sweep(tape, field, np.array([0.2, -0.4]))
        self.assertEqual(len(deltas), 4)
        for delta in deltas:
            np.testing.assert_array_equal(delta, [0.2, -0.4])

    def test_matches_fd_of_flow_map(self):
        field = init_field([1, 8, 1], 'scalar', seed=4)
        y0 = np.array([0.3])
        tape = integrate_fixed(field.drift, y0, (0.0, 0.5), 'dopri5', 0.05)
        delta_end = variational_sweep(tape, field, np.array([1.0]))[-1]
        eps = 1e-5
        plus = integrate_fixed(field.drift, y0 + eps, (0.0, 0.5), 'dopri5', 0.05).y_end
        minus = integrate_fixed(field.drift, y0 - eps, (0.0, 0.5), 'dopri5', 0.05).y_end
        np.testing.assert_allclose(delta_end, (plus - minus) / (2 * eps), rtol=1e-6)

    def test_matrix_columns(self):
        field = init_field([2, 8, 2], 'vector', seed=4)
        tape = integrate_fixed(field.drift, np.array([0.3, -0.2]), (0.0, 0.2), 'dopri5', 0.05)
        matrix = variational_sweep(tape, field, np.eye(2))[-1]
        for k in range(2):
            column = variational_sweep(tape, field, np.eye(2)[:, k])[-1]
            np.testing.assert_allclose(matrix[:, k], column, rtol=1e-14, atol=1e-15)

    def test_bilinear_conservation(self):
        rng = np.random.default_rng(7)
        for d in (1, 2, 3):
            for trial in range(5):
                mode = 'scalar' if trial % 2 == 0 else 'vector'
                dims = [d, 8, 1] if mode == 'scalar' else [d, 8, d]
                field = init_field(dims, mode, seed=100 * d + trial)
                tape = integrate_fixed(field.drift, rng.normal(size=d), (0.0, 0.2), 'dopri5', 0.01)
                self.assertEqual(tape.n_steps, 20)
                p_end = rng.normal(size=d)
                delta0 = rng.normal(size=d)
                deltas = variational_sweep(tape, field, delta0)
                costates, _ = adjoint_states(tape, field, p_end)
                values = np.array([delta @ p for delta, p in zip(deltas, costates)])
                drift = np.abs(values - values[0]).max() / max(1.0, abs(values[0]))
                self.assertLessEqual(drift, 1e-10)


if __name__ == '__main__':
    unittest.main()
