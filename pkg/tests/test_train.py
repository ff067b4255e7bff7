import unittest
from unittest.mock import patch

import numpy as np

from src.errors import ConfigurationError, NumericError
from src.field import MlpField, init_field
from src.solver import integrate_forward, integrate_through, observed_states
from src.systems import generate_dataset, get_system
from src.train import (
    Dataset, LossSpec, OptimizerSpec, OptimizerState, SolverSettings, TrainConfig, Trajectory,
    batch_split, loss_and_gradient, loss_only, optimizer_step, spot_check_invariant, train,
)

FIXED = SolverSettings.fixed(0.01)


def small_dataset(m: int = 2, points: int = 5, dt: float = 0.05) -> Dataset:
    initials = np.array([[1.0, 0.0], [-0.5, 1.5], [0.3, -1.2]])[:m]
    return generate_dataset(get_system('linear-gf'), initials, (points - 1) * dt, dt)


def fd_gradient(field: MlpField, dataset: Dataset, loss_spec: LossSpec, batch_len: int,
                solver: SolverSettings, eps: float = 1e-5) -> np.ndarray:
    perturbed = field.copy()
    theta = field.get_params()
    fd = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = eps
        plus = loss_only(perturbed.set_params(theta + e), dataset, loss_spec, batch_len, solver)
        minus = loss_only(perturbed.set_params(theta - e), dataset, loss_spec, batch_len, solver)
        fd[k] = (plus - minus) / (2 * eps)
    return fd


class TestBatchSplit(unittest.TestCase):

    def setUp(self):
        self.states = np.arange(6, dtype=float).reshape(-1, 1)

    def test_pairs(self):
        segments = batch_split(self.states[:5], 2)
        self.assertEqual([s[:, 0].tolist() for s in segments], [[0, 1], [1, 2], [2, 3], [3, 4]])

    def test_whole_trajectory(self):
        segments = batch_split(self.states[:5], 5)
        self.assertEqual([s[:, 0].tolist() for s in segments], [[0, 1, 2, 3, 4]])

    def test_shorter_tail(self):
        segments = batch_split(Trajectory(self.states), 3)
        self.assertEqual([s[:, 0].tolist() for s in segments], [[0, 1, 2], [2, 3, 4], [4, 5]])

    def test_batch_len_too_small(self):
        with self.assertRaises(ConfigurationError):
            batch_split(self.states, 1)


class TestDataset(unittest.TestCase):

    def test_shape_mismatch(self):
        with self.assertRaises(ConfigurationError):
            Dataset([Trajectory(np.zeros((3, 2))), Trajectory(np.zeros((4, 2)))], dt=0.1)

    def test_non_positive_dt(self):
        with self.assertRaises(ConfigurationError):
            Dataset([Trajectory(np.zeros((3, 2)))], dt=0.0)

    def test_properties(self):
        dataset = Dataset([Trajectory(np.zeros((5, 3))) for _ in range(4)], dt=0.25)
        self.assertEqual((dataset.m, dataset.n, dataset.dim), (4, 4, 3))
        self.assertEqual(dataset.horizon, 1.0)
        self.assertEqual(dataset.residual_points, 16)


class TestLoss(unittest.TestCase):

    def test_single_target_unit_loss(self):
        field = init_field([2, 4, 1], 'scalar', seed=0)
        field.set_params(np.zeros(field.n_params))
        dataset = Dataset([Trajectory(np.array([[0.0, 0.0], [-1.0, 0.0]]))], dt=0.1)
        self.assertAlmostEqual(loss_only(field, dataset), 1.0, places=14)

    def test_augmented_residual_zero_for_exact_difference(self):
        w = np.array([0.5, -1.0])
        field = MlpField([2, 1], 'scalar', [w.reshape(-1, 1)], [np.zeros(1)])
        dt = 0.1
        x0 = np.array([0.2, 0.4])
        dataset = Dataset([Trajectory(np.stack([x0, x0 - dt * w]))], dt=dt)
        standard = loss_only(field, dataset, LossSpec(), 2, FIXED)
        augmented = loss_only(field, dataset, LossSpec('augmented', 1.0), 2, FIXED)
        self.assertLess(augmented - standard, 1e-24)
        self.assertLess(standard, 1e-28)

    def test_self_consistent_dataset(self):
        field = init_field([2, 8, 1], 'scalar', seed=3)
        dt = 0.05
        times = np.arange(5) * dt
        states = observed_states(integrate_through(field.drift, np.array([0.3, 0.2]), times,
                                                   FIXED.tableau, FIXED.ctrl))
        dataset = Dataset([Trajectory(states)], dt=dt)
        self.assertLess(loss_only(field, dataset, LossSpec(), 2, FIXED), 1e-24)

    def test_gradient_zero_on_perfect_fit(self):
        field = init_field([2, 8, 1], 'scalar', seed=3)
        dt = 0.05
        states = [np.array([0.3, 0.2])]
        for _ in range(4):
            states.append(integrate_forward(field.drift, states[-1], (0.0, dt), FIXED.tableau, FIXED.ctrl).y_end)
        dataset = Dataset([Trajectory(np.stack(states))], dt=dt)
        loss, grad = loss_and_gradient(field, dataset, LossSpec(), 2, FIXED)
        self.assertLess(loss, 1e-28)
        self.assertLess(np.abs(grad).max(), 1e-12)

    def test_dimension_mismatch(self):
        field = init_field([3, 4, 1], 'scalar', seed=0)
        with self.assertRaises(ConfigurationError):
            loss_only(field, small_dataset())

    def test_invalid_loss_spec(self):
        with self.assertRaises(ConfigurationError):
            LossSpec('augmented', 0.0)
        with self.assertRaises(ConfigurationError):
            LossSpec('huber')


class TestGradient(unittest.TestCase):

    def setUp(self):
        self.dataset = small_dataset()

    def assert_matches_fd(self, field, loss_spec, batch_len, dataset=None):
        dataset = dataset or self.dataset
        loss, grad = loss_and_gradient(field, dataset, loss_spec, batch_len, FIXED)
        self.assertEqual(loss, loss_only(field, dataset, loss_spec, batch_len, FIXED))
        fd = fd_gradient(field, dataset, loss_spec, batch_len, FIXED)
        rel = np.abs(grad - fd).max() / np.abs(fd).max()
        self.assertLessEqual(rel, 1e-5, f"{loss_spec} batch_len={batch_len}: rel err {rel:.2e}")

    def test_standard_loss(self):
        self.assert_matches_fd(init_field([2, 8, 1], 'scalar', seed=0), LossSpec(), 2)

    def test_augmented_loss(self):
        self.assert_matches_fd(init_field([2, 8, 1], 'scalar', seed=0), LossSpec('augmented', 1.0), 2)

    def test_longer_batches(self):
        field = init_field([2, 8, 1], 'scalar', seed=1)
        for batch_len in (3, 5):
            self.assert_matches_fd(field, LossSpec(), batch_len)
            self.assert_matches_fd(field, LossSpec('augmented', 0.5), batch_len)

    def test_vector_mode(self):
        field = init_field([2, 6, 2], 'vector', seed=2)
        self.assert_matches_fd(field, LossSpec('augmented', 1.0), 3)

    def test_doubling_dataset(self):
        field = init_field([2, 8, 1], 'scalar', seed=4)
        single = Dataset([self.dataset.trajectories[0]], dt=self.dataset.dt)
        double = Dataset([self.dataset.trajectories[0], Trajectory(self.dataset.trajectories[0].states.copy())],
                         dt=self.dataset.dt)
        loss1, grad1 = loss_and_gradient(field, single, LossSpec(), 2, FIXED)
        loss2, grad2 = loss_and_gradient(field, double, LossSpec(), 2, FIXED)
        self.assertEqual(loss2, 2.0 * loss1)
        np.testing.assert_array_equal(grad2, 2.0 * grad1)

    def test_trajectory_order_and_additivity(self):
        field = init_field([2, 8, 1], 'scalar', seed=4)
        dataset = small_dataset(m=3)
        loss, grad = loss_and_gradient(field, dataset, LossSpec('augmented', 1.0), 3, FIXED)

        reversed_dataset = Dataset(list(reversed(dataset.trajectories)), dt=dataset.dt)
        loss_rev, grad_rev = loss_and_gradient(field, reversed_dataset, LossSpec('augmented', 1.0), 3, FIXED)
        self.assertAlmostEqual(loss_rev, loss, delta=1e-12 * loss)
        np.testing.assert_allclose(grad_rev, grad, rtol=1e-12, atol=1e-14 * np.abs(grad).max())

        parts = [loss_and_gradient(field, Dataset([traj], dt=dataset.dt), LossSpec('augmented', 1.0), 3, FIXED)
                 for traj in dataset.trajectories]
        self.assertAlmostEqual(sum(part[0] for part in parts), loss, delta=1e-12 * loss)
        np.testing.assert_allclose(sum(part[1] for part in parts), grad, rtol=1e-12,
                                   atol=1e-14 * np.abs(grad).max())

    def test_workers_do_not_change_result(self):
        field = init_field([2, 8, 1], 'scalar', seed=4)
        dataset = small_dataset(m=3)
        serial = loss_and_gradient(field, dataset, LossSpec(), 2, FIXED, workers=1)
        parallel = loss_and_gradient(field, dataset, LossSpec(), 2, FIXED, workers=3)
        self.assertEqual(serial[0], parallel[0])
        np.testing.assert_array_equal(serial[1], parallel[1])

    def test_output_bias_gauge(self):
        field = init_field([2, 8, 1], 'scalar', seed=5)
        loss, grad = loss_and_gradient(field, self.dataset, LossSpec(), 2, FIXED)
        params = field.get_params()
        params[-1] += 10.0
        shifted = field.copy().set_params(params)
        loss_shifted, grad_shifted = loss_and_gradient(shifted, self.dataset, LossSpec(), 2, FIXED)
        self.assertEqual(loss, loss_shifted)
        np.testing.assert_array_equal(grad, grad_shifted)
        self.assertEqual(grad[-1], 0.0)


class TestOptimizer(unittest.TestCase):

    def test_gd_zero_gradient(self):
        params = np.array([1.0, -2.0])
        new, _ = optimizer_step(params, np.zeros(2), OptimizerState(), OptimizerSpec('gd', eta=0.1))
        np.testing.assert_array_equal(new, params)

    def test_gd_step(self):
        new, state = optimizer_step(np.array([1.0, 1.0]), np.array([2.0, -4.0]), OptimizerState(),
                                    OptimizerSpec('gd', eta=0.1))
        np.testing.assert_allclose(new, [0.8, 1.4], atol=1e-15)
        self.assertEqual(state.step, 1)

    def test_adam_first_step(self):
        grad = np.array([3.0, -0.5, 0.0])
        new, state = optimizer_step(np.zeros(3), grad, OptimizerState(), OptimizerSpec('adam', eta=0.01))
        np.testing.assert_allclose(new, [-0.01, 0.01, 0.0], atol=1e-9)
        self.assertEqual(state.step, 1)

    def test_non_finite_gradient(self):
        with self.assertRaises(NumericError):
            optimizer_step(np.zeros(2), np.array([np.nan, 0.0]), OptimizerState(), OptimizerSpec())

    def test_length_mismatch(self):
        with self.assertRaises(ConfigurationError):
            optimizer_step(np.zeros(2), np.zeros(3), OptimizerState(), OptimizerSpec())

    def test_invalid_spec(self):
        with self.assertRaises(ConfigurationError):
            OptimizerSpec('sgd')
        with self.assertRaises(ConfigurationError):
            OptimizerSpec(eta=0.0)


class TestTrain(unittest.TestCase):

    def setUp(self):
        self.dataset = small_dataset()

    def config(self, **overrides) -> TrainConfig:
        options = dict(dims=(2, 8, 1), mode='scalar', solver=FIXED, seed=7,
                       optimizer=OptimizerSpec('adam', eta=1e-2, K=20), threshold=0.0)
        options.update(overrides)
        return TrainConfig(**options)

    def test_zero_iterations(self):
        field, history = train(self.config(optimizer=OptimizerSpec(K=0)), self.dataset)
        self.assertEqual(history, [])
        np.testing.assert_array_equal(field.get_params(), init_field((2, 8, 1), 'scalar', 7).get_params())

    def test_deterministic(self):
        _, first = train(self.config(), self.dataset)
        _, second = train(self.config(), self.dataset)
        self.assertEqual([h.loss for h in first], [h.loss for h in second])
        self.assertEqual([h.grad_norm for h in first], [h.grad_norm for h in second])

    def test_loss_decreases(self):
        field, history = train(self.config(optimizer=OptimizerSpec('adam', eta=1e-2, K=60)), self.dataset)
        self.assertEqual(len(history), 60)
        self.assertLess(loss_only(field, self.dataset, LossSpec(), 2, FIXED), history[0].loss)

    def test_early_stop(self):
        _, history = train(self.config(threshold=1e9), self.dataset)
        self.assertEqual(len(history), 1)

    def test_default_threshold(self):
        self.assertAlmostEqual(self.config(threshold=None).stop_threshold(self.dataset), 1e-8 * 8)

    def test_callback_sees_every_entry(self):
        seen = []
        _, history = train(self.config(optimizer=OptimizerSpec(K=3)), self.dataset, callback=seen.append)
        self.assertEqual(seen, history)
        self.assertEqual([h.iteration for h in history], [0, 1, 2])

    def test_initial_field_is_not_modified(self):
        initial = init_field((2, 8, 1), 'scalar', seed=1)
        before = initial.get_params()
        train(self.config(optimizer=OptimizerSpec(K=2)), self.dataset, initial=initial)
        np.testing.assert_array_equal(initial.get_params(), before)

    def test_dimension_mismatch(self):
        with self.assertRaises(ConfigurationError):
            train(self.config(dims=(3, 8, 1)), self.dataset)

    def test_invariant_spot_check(self):
        field = init_field((2, 8, 1), 'scalar', seed=3)
        self.assertLessEqual(spot_check_invariant(field, self.dataset, FIXED, 0), 1e-10)
        self.assertLessEqual(spot_check_invariant(field, self.dataset, SolverSettings(), 1), 1e-10)

        config = self.config(optimizer=OptimizerSpec(K=3), log_every=1, check_invariant=True)
        with self.assertLogs('src.train', level='DEBUG') as logs:
            train(config, self.dataset)
        checks = [record for record in logs.records if 'delta^T p drift' in record.getMessage()]
        self.assertEqual(len(checks), 3)
        self.assertTrue(all(record.levelname == 'DEBUG' for record in checks))

    def test_invariant_violation_is_logged(self):
        config = self.config(optimizer=OptimizerSpec(K=4), log_every=2, check_invariant=True)
        with patch('src.train.invariant_drift', return_value=1e-6) as drift:
            with self.assertLogs('src.train', level='WARNING') as logs:
                train(config, self.dataset)
        self.assertEqual(drift.call_count, 2)
        self.assertTrue(any('exceeds' in line for line in logs.output))

    def test_invariant_not_checked_by_default(self):
        with patch('src.train.invariant_drift') as drift:
            train(self.config(optimizer=OptimizerSpec(K=2), log_every=1), self.dataset)
        drift.assert_not_called()


if __name__ == '__main__':
    unittest.main()
