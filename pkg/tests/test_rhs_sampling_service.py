import unittest

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from services.errors import ConfigError
from services.rhs_sampling_service import (
    RhsGeneratorConfig,
    build_rhs_pool,
    calibrate_time_series,
    sample_lhs,
    sample_rhs,
    sample_time_series,
)
from utils.random_utils import substream

B_NOMINAL = np.array([10.0, 20.0, 30.0])


class TestTimeSeries(unittest.TestCase):
    def test_shape_and_fixed_rows(self):
        # Arrange
        cfg = RhsGeneratorConfig(horizon=40, perturbed_rows=[0, 2], seed=5)

        # Act
        samples = sample_time_series(cfg, B_NOMINAL)

        # Assert
        self.assertEqual(samples.shape, (40, 3))
        np.testing.assert_array_equal(samples[:, 1], np.full(40, 20.0))
        self.assertGreater(np.ptp(samples[:, 0]), 0.0)

    def test_same_seed_same_samples(self):
        # Arrange
        cfg = RhsGeneratorConfig(horizon=25, seed=9)

        # Act
        first = sample_rhs(cfg, B_NOMINAL)
        second = sample_rhs(cfg, B_NOMINAL)

        # Assert
        np.testing.assert_array_equal(first, second)

    def test_explicit_rng_overrides_seed(self):
        # Arrange
        cfg = RhsGeneratorConfig(horizon=10, seed=1)

        # Act
        default = sample_time_series(cfg, B_NOMINAL)
        branched = sample_time_series(cfg, B_NOMINAL, substream(1, 99))

        # Assert
        self.assertFalse(np.array_equal(default, branched))

    def test_trend_and_noise(self):
        # Arrange
        cfg = RhsGeneratorConfig(horizon=4000, a0=[0.5, 0.0, 0.0], a1=[1.0, 2.0, 3.0], sigma=[0.2, 0.0, 1.0])

        # Act
        samples = sample_time_series(cfg, B_NOMINAL)

        # Assert
        index = np.arange(1, 4001)
        residual = samples[:, 0] - (0.5 * index + 1.0)
        self.assertAlmostEqual(float(residual.mean()), 0.0, delta=0.02)
        self.assertAlmostEqual(float(residual.std()), 0.2, delta=0.02)
        np.testing.assert_array_equal(samples[:, 1], np.full(4000, 2.0))

    def test_wrong_mode(self):
        with self.assertRaises(ConfigError):
            sample_time_series(RhsGeneratorConfig(mode="latin_hypercube"), B_NOMINAL)


class TestLatinHypercube(unittest.TestCase):
    def test_one_draw_per_stratum(self):
        # Arrange
        n = 50
        cfg = RhsGeneratorConfig(mode="latin_hypercube", horizon=n, lo=[0.0, 5.0, 10.0], hi=[1.0, 6.0, 20.0], seed=3)

        # Act
        samples = sample_lhs(cfg, B_NOMINAL)

        # Assert
        for k, (lo, hi) in enumerate(zip(cfg.lo, cfg.hi)):
            strata = np.floor((samples[:, k] - lo) / (hi - lo) * n).astype(int)
            self.assertEqual(sorted(strata.tolist()), list(range(n)))

    def test_midpoint_variant(self):
        # Arrange
        cfg = RhsGeneratorConfig(mode="latin_hypercube", horizon=4, perturbed_rows=[0], lo=[0.0], hi=[1.0], midpoint=True)

        # Act
        samples = sample_lhs(cfg, B_NOMINAL)

        # Assert
        np.testing.assert_allclose(sorted(samples[:, 0]), [0.125, 0.375, 0.625, 0.875])
        np.testing.assert_array_equal(samples[:, 2], np.full(4, 30.0))

    def test_default_ranges_bracket_nominal(self):
        # Arrange
        cfg = RhsGeneratorConfig(mode="latin_hypercube", horizon=30)

        # Act
        samples = sample_rhs(cfg, B_NOMINAL)

        # Assert
        self.assertTrue(np.all(samples >= 0.9 * B_NOMINAL - 1e-12))
        self.assertTrue(np.all(samples <= 1.1 * B_NOMINAL + 1e-12))


class TestConfig(unittest.TestCase):
    def test_lo_above_hi(self):
        with self.assertRaises(PydanticValidationError):
            RhsGeneratorConfig(lo=[2.0], hi=[1.0])

    def test_unknown_key(self):
        with self.assertRaises(PydanticValidationError):
            RhsGeneratorConfig(horizon=5, drift=1.0)

    def test_resolve_length_mismatch(self):
        with self.assertRaises(ConfigError):
            RhsGeneratorConfig(a0=[0.1]).resolve(B_NOMINAL)

    def test_resolve_row_out_of_range(self):
        with self.assertRaises(ConfigError):
            RhsGeneratorConfig(perturbed_rows=[3]).resolve(B_NOMINAL)

    def test_pool_size(self):
        # Act
        pool = build_rhs_pool(RhsGeneratorConfig(seed=2), B_NOMINAL, size=123)

        # Assert
        self.assertEqual(pool.shape, (123, 3))


class TestCalibration(unittest.TestCase):
    def test_recovers_generating_parameters(self):
        # Arrange
        truth = RhsGeneratorConfig(horizon=500, a0=[0.05, 0.0, -0.02], a1=[10.0, 20.0, 30.0], sigma=[0.1, 0.3, 0.05], seed=4)
        history = sample_time_series(truth, B_NOMINAL)

        # Act
        fitted = calibrate_time_series(history, B_NOMINAL, seed=4)

        # Assert
        np.testing.assert_allclose(fitted.a0, truth.a0, atol=5e-3)
        np.testing.assert_allclose(fitted.a1, truth.a1, atol=0.1)
        np.testing.assert_allclose(fitted.sigma, truth.sigma, rtol=0.15)
        self.assertEqual(fitted.perturbed_rows, [0, 1, 2])

    def test_needs_three_observations(self):
        with self.assertRaises(ConfigError):
            calibrate_time_series(np.ones((2, 3)), B_NOMINAL)


if __name__ == "__main__":
    unittest.main()
