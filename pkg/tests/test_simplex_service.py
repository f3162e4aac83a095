import unittest

import numpy as np

from services.errors import ConstructionError, DimensionMismatch, InfeasibleRhs, TooLarge
from services.simplex_service import (
    LinearProgram,
    LpStatus,
    brute_force_optimum,
    enumerate_optimal_bases,
    resolve_with_rhs,
    solve_lp,
)

# x3 serves both rows at cost 1.5; whichever row is larger tops up with x1 or x2.
TWO_CONE_C = np.array([1.0, 1.0, 1.5, 3.0, 3.0])
TWO_CONE_A = np.array([[1.0, 0.0, 1.0, 1.0, 0.0], [0.0, 1.0, 1.0, 0.0, 1.0]])


def two_cone_lp(b):
    return LinearProgram(TWO_CONE_C, TWO_CONE_A, b)


def random_bounded_lp(rng, n, m):
    A = rng.normal(size=(m, n))
    x0 = rng.uniform(0.0, 2.0, size=n)
    c = rng.uniform(0.1, 3.0, size=n)
    return LinearProgram(c, A, A @ x0)


def random_cases(count, seed=20240611):
    rng = np.random.default_rng(seed)
    cases = []
    for _ in range(count):
        n = int(rng.integers(2, 11))
        m = int(rng.integers(1, min(n, 4) + 1))
        cases.append(random_bounded_lp(rng, n, m))
    return cases


class TestSolveLp(unittest.TestCase):
    def test_solve_two_cone_lp(self):
        # Arrange
        lp = two_cone_lp([3.0, 1.0])

        # Act
        solution = solve_lp(lp)

        # Assert
        self.assertIs(solution.status, LpStatus.OPTIMAL)
        np.testing.assert_allclose(solution.x, [2.0, 0.0, 1.0, 0.0, 0.0], atol=1e-12)
        self.assertAlmostEqual(solution.objective, 3.5, places=12)
        self.assertEqual(solution.basis, (0, 2))

    def test_strong_duality(self):
        # Arrange
        lp = two_cone_lp([1.0, 4.0])

        # Act
        solution = solve_lp(lp)

        # Assert
        self.assertAlmostEqual(float(solution.duals @ lp.rhs), solution.objective, places=10)
        self.assertTrue(np.all(solution.reduced_costs >= -1e-9))

    def test_matches_vertex_enumeration(self):
        # Arrange
        cases = random_cases(500)

        for lp in cases:
            # Act
            solution = solve_lp(lp)
            expected, _ = brute_force_optimum(lp)

            # Assert
            self.assertIs(solution.status, LpStatus.OPTIMAL)
            self.assertAlmostEqual(solution.objective, expected, delta=1e-9 * (1.0 + abs(expected)))

    def test_complementary_slackness(self):
        for lp in random_cases(200, seed=7):
            # Act
            solution = solve_lp(lp)

            # Assert
            d = solution.reduced_costs
            np.testing.assert_allclose(lp.constraint_matrix.T @ solution.duals + d, lp.objective, atol=1e-9)
            self.assertTrue(np.all(d >= -1e-8))
            self.assertLessEqual(float(np.max(np.abs(solution.x * d))), 1e-8)
            self.assertAlmostEqual(float(solution.duals @ lp.rhs), solution.objective, delta=1e-9 * (1.0 + abs(solution.objective)))

    def test_infeasible(self):
        # Arrange
        lp = LinearProgram([1.0, 1.0], [[1.0, 1.0]], [-1.0])

        # Act
        solution = solve_lp(lp)

        # Assert
        self.assertIs(solution.status, LpStatus.INFEASIBLE)
        self.assertEqual(solution.basis, ())

    def test_unbounded(self):
        # Arrange
        lp = LinearProgram([-1.0, 0.0], [[1.0, -1.0]], [0.0])

        # Act
        solution = solve_lp(lp)

        # Assert
        self.assertIs(solution.status, LpStatus.UNBOUNDED)

    def test_free_variable(self):
        # Arrange
        lp = LinearProgram([1.0, 0.0], [[1.0, -1.0]], [-2.0], var_lower=[-np.inf, 0.0])

        # Act
        solution = solve_lp(lp)

        # Assert
        self.assertIs(solution.status, LpStatus.OPTIMAL)
        self.assertAlmostEqual(solution.objective, -2.0, places=12)

    def test_upper_bounds(self):
        # Arrange
        lp = LinearProgram([-1.0, -2.0, 0.0], [[1.0, 1.0, 1.0]], [3.0], var_upper=[2.0, 1.0, np.inf])

        # Act
        solution = solve_lp(lp)

        # Assert
        np.testing.assert_allclose(solution.x, [2.0, 1.0, 0.0], atol=1e-12)
        self.assertAlmostEqual(solution.objective, -4.0, places=12)

    def test_no_constraints(self):
        # Arrange
        lp = LinearProgram([1.0, 2.0], np.zeros((0, 2)), [])

        # Act
        solution = solve_lp(lp)

        # Assert
        self.assertIs(solution.status, LpStatus.OPTIMAL)
        self.assertEqual(solution.objective, 0.0)


class TestLinearProgramConstruction(unittest.TestCase):
    def test_rank_deficient(self):
        with self.assertRaises(ConstructionError):
            LinearProgram([1.0, 1.0, 1.0], [[1.0, 1.0, 0.0], [2.0, 2.0, 0.0]], [1.0, 2.0])

    def test_rhs_dimension(self):
        with self.assertRaises(DimensionMismatch):
            LinearProgram([1.0, 1.0], [[1.0, 1.0]], [1.0, 2.0])

    def test_more_rows_than_columns(self):
        with self.assertRaises(ConstructionError):
            LinearProgram([1.0], [[1.0], [2.0]], [1.0, 2.0], check_rank=False)

    def test_arrays_are_read_only(self):
        # Arrange
        lp = two_cone_lp([1.0, 1.0])

        # Act & Assert
        with self.assertRaises(ValueError):
            lp.rhs[0] = 5.0


class TestResolveWithRhs(unittest.TestCase):
    def test_still_optimal_hint_needs_no_pivots(self):
        # Arrange
        lp = two_cone_lp([3.0, 1.0])
        first = solve_lp(lp)

        # Act
        again = resolve_with_rhs(lp, [3.5, 1.2], first.basis)

        # Assert
        self.assertEqual(again.iterations, 0)
        self.assertEqual(again.basis, first.basis)
        np.testing.assert_allclose(again.x, [2.3, 0.0, 1.2, 0.0, 0.0], atol=1e-12)

    def test_dual_feasible_hint_crosses_cones(self):
        # Arrange
        lp = two_cone_lp([3.0, 1.0])
        first = solve_lp(lp)

        # Act
        moved = resolve_with_rhs(lp, [1.0, 3.0], first.basis)

        # Assert
        cold = solve_lp(lp.with_rhs([1.0, 3.0]))
        self.assertIs(moved.status, LpStatus.OPTIMAL)
        self.assertAlmostEqual(moved.objective, cold.objective, places=10)
        self.assertEqual(moved.basis, (1, 2))

    def test_bad_hint_falls_back(self):
        # Arrange
        lp = two_cone_lp([3.0, 1.0])

        # Act
        solution = resolve_with_rhs(lp, [3.0, 1.0], (0, 3, 4))

        # Assert
        self.assertAlmostEqual(solution.objective, 3.5, places=12)

    def test_singular_hint_falls_back(self):
        # Arrange
        lp = two_cone_lp([3.0, 1.0])

        # Act
        solution = resolve_with_rhs(lp, [3.0, 1.0], (0, 3))

        # Assert
        self.assertIs(solution.status, LpStatus.OPTIMAL)
        self.assertAlmostEqual(solution.objective, 3.5, places=12)

    def test_infeasible_new_rhs(self):
        # Arrange
        lp = two_cone_lp([3.0, 1.0])
        first = solve_lp(lp)

        # Act
        solution = resolve_with_rhs(lp, [-1.0, 1.0], first.basis)

        # Assert
        self.assertIs(solution.status, LpStatus.INFEASIBLE)


class TestEnumeration(unittest.TestCase):
    def test_bases_per_rhs(self):
        # Arrange
        lp = two_cone_lp([1.0, 1.0])

        # Act
        bases = enumerate_optimal_bases(lp, [[3.0, 1.0], [1.0, 3.0], [2.5, 0.5]])

        # Assert
        self.assertEqual(bases, [(0, 2), (1, 2), (0, 2)])

    def test_infeasible_rhs(self):
        with self.assertRaises(InfeasibleRhs):
            enumerate_optimal_bases(two_cone_lp([1.0, 1.0]), [[-1.0, -1.0]])

    def test_too_large(self):
        # Arrange
        rng = np.random.default_rng(3)
        lp = random_bounded_lp(rng, 13, 2)

        # Act & Assert
        with self.assertRaises(TooLarge):
            brute_force_optimum(lp)


if __name__ == "__main__":
    unittest.main()
