import unittest

import numpy as np

from src.errors import ConfigurationError, GenerationError, ModeError, NumericError
from src.systems import (
    PRESETS, Ball, Box, Points, SystemSpec, domain_from_document, generate_dataset, get_preset,
    get_system, lorenz_equilibria, observation_times, pendulum_energy, sample_initials, true_drift,
    true_potential,
)


class TestSystems(unittest.TestCase):

    def test_linear_gf_drift(self):
        np.testing.assert_array_equal(true_drift('linear-gf', [1.0, 0.0]), [-2.0, -1.0])

    def test_lorenz_origin(self):
        np.testing.assert_array_equal(true_drift('lorenz', [0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])

    def test_pendulum_drift(self):
        np.testing.assert_allclose(true_drift('pendulum', [0.0, 1.0]), [1.0, -0.2], atol=1e-15)

    def test_potentials(self):
        self.assertEqual(float(true_potential('linear-gf', [1.0, 1.0])), 3.0)
        self.assertEqual(float(true_potential('linear-gf', [0.0, 0.0])), 0.0)
        self.assertAlmostEqual(float(true_potential('nonlinear-gf', [np.pi / 2, 0.0])), 1.0, places=15)

    def test_potential_of_non_gradient_system(self):
        with self.assertRaises(ModeError):
            true_potential('lorenz', [1.0, 2.0, 3.0])

    def test_unknown_system(self):
        with self.assertRaises(ConfigurationError):
            get_system('rossler')

    def test_wrong_state_dimension(self):
        with self.assertRaises(ConfigurationError):
            true_drift('lorenz', [1.0, 2.0])

    def test_drift_is_minus_potential_gradient(self):
        rng = np.random.default_rng(0)
        eps = 1e-6
        for name in ('linear-gf', 'nonlinear-gf'):
            system = get_system(name)
            points = rng.uniform(-3.0, 3.0, size=(100, 2))
            grad = np.stack([
                (system.potential(points + e) - system.potential(points - e)) / (2 * eps)
                for e in np.eye(2) * eps
            ], axis=-1)
            np.testing.assert_allclose(system.drift(points), -grad, atol=1e-6)

    def test_lorenz_equilibria(self):
        for point in lorenz_equilibria():
            np.testing.assert_allclose(true_drift('lorenz', point), 0.0, atol=1e-12)

    def test_field_modes(self):
        self.assertEqual(get_system('linear-gf').field_mode, 'scalar')
        self.assertEqual(get_system('pendulum').field_mode, 'vector')


class TestSampling(unittest.TestCase):

    def test_box_reproducible_and_inside(self):
        box = Box((0.0, 0.0), (1.0, 1.0))
        first = sample_initials(box, 3, seed=11)
        second = sample_initials(box, 3, seed=11)
        self.assertEqual(first.shape, (3, 2))
        np.testing.assert_array_equal(first, second)
        self.assertTrue(np.all((first >= 0.0) & (first <= 1.0)))

    def test_ball_inside(self):
        ball = Ball((10.0, 15.0, 17.0), 1.0)
        points = sample_initials(ball, 300, seed=2022)
        distances = np.linalg.norm(points - np.array(ball.center), axis=1)
        self.assertTrue(np.all(distances <= 1.0))
        self.assertGreater(distances.max(), 0.8)

    def test_zero_count(self):
        with self.assertRaises(ConfigurationError):
            sample_initials(Box((0.0,), (1.0,)), 0, seed=0)

    def test_degenerate_box(self):
        with self.assertRaises(ConfigurationError):
            Box((0.0, 1.0), (1.0, 1.0))

    def test_points(self):
        points = Points(((-1.0, -1.0), (2.0, 3.0)))
        np.testing.assert_array_equal(sample_initials(points, 1, seed=0), [[-1.0, -1.0]])
        with self.assertRaises(ConfigurationError):
            sample_initials(points, 3, seed=0)

    def test_domain_documents(self):
        for domain in (Box((-2.0, -2.0), (2.0, 2.0)), Ball((0.0, 0.0, 0.0), 2.0), Points(((1.0, 2.0),))):
            self.assertEqual(domain_from_document(domain.to_document()), domain)


class TestGeneration(unittest.TestCase):

    def test_linear_gf_unit_step(self):
        dataset = generate_dataset('linear-gf', [[1.0, 0.0]], T=1.0, dt=1.0)
        exact = 0.5 * np.exp(-3.0) * np.array([1.0, 1.0]) + 0.5 * np.exp(-1.0) * np.array([1.0, -1.0])
        np.testing.assert_allclose(dataset.trajectories[0].states[1], exact, atol=1e-9)
        self.assertEqual(dataset.metadata['system'], 'linear-gf')
        self.assertEqual(dataset.metadata['generator']['rtol'], 1e-10)

    def test_difference_quotients_track_drift(self):
        dt = 0.01
        dataset = generate_dataset('nonlinear-gf', [[0.5, -0.3]], T=0.5, dt=dt)
        states = dataset.trajectories[0].states
        quotients = np.diff(states, axis=0) / dt
        errors = np.linalg.norm(quotients - true_drift('nonlinear-gf', states[:-1]), axis=1)
        self.assertLess(errors.max(), 5.0 * dt)

    def test_pendulum_dissipation(self):
        dataset = generate_dataset('pendulum', [[-1.0, -1.0]], T=5.0, dt=0.05)
        states = dataset.trajectories[0].states
        self.assertEqual(states.shape, (101, 2))
        energy = pendulum_energy(states)
        self.assertLessEqual(np.diff(energy).max(), 1e-6)

    def test_horizon_must_be_multiple_of_dt(self):
        with self.assertRaises(ConfigurationError):
            observation_times(1.0, 0.3)
        np.testing.assert_allclose(observation_times(0.2, 0.05), [0.0, 0.05, 0.1, 0.15, 0.2])

    def test_generation_error_names_trajectory(self):
        exploding = SystemSpec('exploding', 1, lambda x: x ** 3)
        with self.assertRaises(GenerationError) as ctx:
            generate_dataset(exploding, [[0.1], [5.0]], T=1.0, dt=0.5)
        self.assertEqual(ctx.exception.trajectory, 1)
        self.assertIsInstance(ctx.exception.__cause__, NumericError)

    def test_parallel_generation_matches_serial(self):
        initials = sample_initials(Box((-2.0, -2.0), (2.0, 2.0)), 4, seed=1)
        serial = generate_dataset('linear-gf', initials, T=0.5, dt=0.05)
        parallel = generate_dataset('linear-gf', initials, T=0.5, dt=0.05, workers=2)
        for a, b in zip(serial.trajectories, parallel.trajectories):
            np.testing.assert_array_equal(a.states, b.states)


class TestPresets(unittest.TestCase):

    def test_names(self):
        self.assertEqual(sorted(PRESETS), sorted(
            ['linear-gf', 'nonlinear-gf', 'pendulum', 'lorenz-short', 'lorenz-long', 'lorenz-ball']))

    def test_linear_gf_setup(self):
        preset = get_preset('linear-gf')
        self.assertEqual((preset.m, preset.T, preset.dt), (8, 5.0, 0.05))
        self.assertEqual(preset.dims, (2, 50, 50, 1))
        self.assertEqual(preset.mode, 'scalar')

    def test_lorenz_presets_use_vector_fields(self):
        for name in ('lorenz-short', 'lorenz-long', 'lorenz-ball'):
            preset = get_preset(name)
            self.assertEqual(preset.dims, (3, 300, 300, 300, 3))
            self.assertEqual(preset.mode, 'vector')
        self.assertEqual(round(get_preset('lorenz-long').T / get_preset('lorenz-long').dt) + 1, 2001)

    def test_unknown_preset(self):
        with self.assertRaises(ConfigurationError):
            get_preset('lorenz-medium')


if __name__ == '__main__':
    unittest.main()
