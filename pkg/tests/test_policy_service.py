import math
import os
import tempfile
import unittest
from unittest.mock import MagicMock, patch

import numpy as np

from services.errors import (
    CmInfeasible,
    DimensionMismatch,
    EmptyBundle,
    EmptyPolicy,
    TooLarge,
    TrainingInfeasible,
    ValidationError,
)
from services.instance_service import first_stage_objective, generate_synthetic, mean_value_instance, preset_spec
from services.policy_service import (
    EvaluationOptions,
    PLDCPolicy,
    PolicyOptions,
    TrainingDataset,
    TrainingPoint,
    apply_policy,
    apply_policy_batch,
    assign_cells,
    build_consolidated_master,
    build_training_lp,
    cell_affine_ranks,
    corrected_objective,
    dataset_from_lp,
    dataset_from_lshaped,
    dataset_from_sd,
    dc_components,
    evaluate_policy,
    feasibility_gap,
    fit_pointwise_baseline,
    fit_policy,
    fit_policy_with_fallback,
    load_dataset,
    load_policy,
    optimality_gap,
    save_dataset,
    save_policy,
    solve_consolidated_master,
)
from services.rhs_sampling_service import RhsGeneratorConfig, sample_rhs
from services.sd_service import SdOptions
from services.simplex_service import LinearProgram, LpStatus, solve_lp

SLOW = os.environ.get("PLDC_SLOW_TESTS") == "1"

TWO_CONE_C = np.array([1.0, 1.0, 1.5, 3.0, 3.0])
TWO_CONE_A = np.array([[1.0, 0.0, 1.0, 1.0, 0.0], [0.0, 1.0, 1.0, 0.0, 1.0]])

# five right-hand sides on each side of the diagonal b1 = b2
TWO_CONE_RHS = [
    [3.0, 1.0],
    [1.0, 3.0],
    [2.5, 1.2],
    [1.2, 2.5],
    [2.8, 2.0],
    [2.0, 2.8],
    [2.0, 1.0],
    [1.0, 2.0],
    [3.0, 2.5],
    [2.5, 3.0],
]


def two_cone_dataset(rhs=TWO_CONE_RHS) -> TrainingDataset:
    return dataset_from_lp(TWO_CONE_C, TWO_CONE_A, rhs)


def lp_optimum(b) -> np.ndarray:
    return solve_lp(LinearProgram(TWO_CONE_C, TWO_CONE_A, b)).x


class TestTrainingDataset(unittest.TestCase):
    def test_dataset_from_lp(self):
        # Act
        dataset = two_cone_dataset()

        # Assert
        self.assertEqual(len(dataset), 10)
        self.assertEqual(dataset.bundle, [])
        np.testing.assert_allclose(dataset.points[0].x_star, [2.0, 0.0, 1.0, 0.0, 0.0], atol=1e-12)
        self.assertEqual(dataset.points[0].eta_star, 0.0)
        self.assertAlmostEqual(dataset.points[0].v_star, 3.5, places=12)

    def test_infeasible_rhs_is_skipped(self):
        # Act
        dataset = two_cone_dataset([[3.0, 1.0], [-1.0, 1.0]])

        # Assert
        self.assertEqual(len(dataset), 1)

    def test_extend_skips_known_rhs(self):
        # Arrange
        dataset = two_cone_dataset()
        again = TrainingPoint(np.array([3.0, 1.0]), np.array([2.0, 0.0, 1.0, 0.0, 0.0]), 0.0, 3.5, "LP")
        fresh = TrainingPoint(np.array([3.0, 1.5]), np.array([1.5, 0.0, 1.5, 0.0, 0.0]), 0.0, 3.75, "LP")

        # Act
        added = dataset.extend([again, fresh])

        # Assert
        self.assertEqual(added, 1)
        self.assertEqual(len(dataset), 11)

    def test_dimension_check(self):
        # Arrange
        dataset = two_cone_dataset()
        bad = TrainingPoint(np.array([1.0, 2.0, 3.0]), np.zeros(5), 0.0, 0.0, "LP")

        # Act & Assert
        with self.assertRaises(DimensionMismatch):
            dataset.extend([bad])

    def test_save_and_load(self):
        # Arrange
        dataset = two_cone_dataset()

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "dataset.json")

            # Act
            save_dataset(dataset, path)
            loaded = load_dataset(path)

        # Assert
        np.testing.assert_array_equal(loaded.rhs_matrix, dataset.rhs_matrix)
        for ours, theirs in zip(loaded.points, dataset.points):
            np.testing.assert_array_equal(ours.x_star, theirs.x_star)
            self.assertEqual(ours.source, "LP")

    def test_infeasible_count_survives_save_and_load(self):
        # Arrange
        dataset = two_cone_dataset([[3.0, 1.0], [-1.0, 1.0], [1.0, -2.0]])

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "dataset.json")

            # Act
            save_dataset(dataset, path)
            loaded = load_dataset(path)

        # Assert
        self.assertEqual(dataset.infeasible_rhs, 2)
        self.assertEqual(loaded.infeasible_rhs, 2)
        self.assertEqual(len(loaded), 1)


class TestCells(unittest.TestCase):
    def setUp(self):
        self.dataset = two_cone_dataset()

    def test_cells_follow_the_optimal_basis(self):
        # Act
        cells = assign_cells(self.dataset)

        # Assert
        self.assertEqual(len(cells), 2)
        self.assertEqual(cells[0].basis_key, (0, 2))
        self.assertEqual(cells[0].members, [0, 2, 4, 6, 8])
        self.assertEqual(cells[1].basis_key, (1, 2))
        self.assertEqual(cells[1].anchor, 1)
        self.assertEqual(cell_affine_ranks(self.dataset, cells), [2, 2])

    def test_targets_are_master_optima(self):
        # Act
        cells = assign_cells(self.dataset)

        # Assert
        for cell in cells:
            for row, i in enumerate(cell.members):
                expected = np.concatenate([lp_optimum(self.dataset.points[i].b), [0.0]])
                np.testing.assert_allclose(cell.targets[row], expected, atol=1e-12)

    def test_warm_started_master_needs_no_pivots(self):
        # Act
        solution = solve_consolidated_master(self.dataset, 2)

        # Assert
        self.assertIs(solution.status, LpStatus.OPTIMAL)
        self.assertEqual(solution.iterations, 0)

    def test_master_dimension_check(self):
        with self.assertRaises(DimensionMismatch):
            build_consolidated_master((TWO_CONE_C, TWO_CONE_A), [], [1.0, 2.0, 3.0])

    def test_infeasible_master(self):
        # Arrange
        point = TrainingPoint(np.array([-1.0, 1.0]), np.zeros(5), 0.0, 0.0, "LP")
        dataset = TrainingDataset(c=TWO_CONE_C, A=TWO_CONE_A, points=[point])

        # Act & Assert
        with self.assertRaises(CmInfeasible):
            solve_consolidated_master(dataset, 0)

    def test_empty_dataset(self):
        with self.assertRaises(ValidationError):
            assign_cells(TrainingDataset(c=TWO_CONE_C, A=TWO_CONE_A))


class TestFitPolicy(unittest.TestCase):
    def setUp(self):
        self.dataset = two_cone_dataset()

    def test_recovers_training_points(self):
        for backend in ("highs", "simplex"):
            # Act
            policy = fit_policy(self.dataset, PolicyOptions(backend=backend))

            # Assert
            for point in self.dataset.points:
                x_hat, eta_hat = apply_policy(policy, point.b)
                np.testing.assert_allclose(x_hat, point.x_star, atol=1e-6)
                self.assertAlmostEqual(eta_hat, 0.0, delta=1e-6)
            self.assertLessEqual(policy.metadata["max_recovery_error"], 1e-6)
            self.assertEqual(policy.metadata["cells"], 2)
            self.assertFalse(policy.metadata["relaxed"])

    def test_exact_inside_each_cell(self):
        # Arrange
        policy = fit_policy(self.dataset, PolicyOptions(backend="highs"))
        B = self.dataset.rhs_matrix

        for cell in policy.cells:
            first, second = cell.members[0], cell.members[-1]
            midpoint = 0.5 * (B[first] + B[second])

            # Act
            x_hat, _ = apply_policy(policy, midpoint)

            # Assert
            np.testing.assert_allclose(x_hat, lp_optimum(midpoint), atol=1e-6)
            self.assertLessEqual(feasibility_gap(TWO_CONE_A, midpoint, x_hat), 1e-6)

    def test_recovery_on_fifty_points_and_convex_combinations(self):
        # Arrange
        rng = np.random.default_rng(17)
        dataset = two_cone_dataset(rng.uniform(0.5, 3.5, size=(50, 2)))
        policy = fit_policy(dataset)
        B = dataset.rhs_matrix
        combinations = []
        for _ in range(200):
            cell = policy.cells[int(rng.integers(len(policy.cells)))]
            members = rng.choice(cell.members, size=min(3, len(cell.members)), replace=False)
            combinations.append(rng.dirichlet(np.ones(members.size)) @ B[members])

        for b in [*B, *combinations]:
            # Act
            x_hat, _ = apply_policy(policy, b)

            # Assert
            np.testing.assert_allclose(x_hat, lp_optimum(b), rtol=0, atol=1e-6)
        self.assertEqual(len(dataset), 50)
        self.assertEqual(policy.num_cells, 2)

    def test_both_terms_are_convex(self):
        # Arrange
        policy = fit_policy(self.dataset)
        rng = np.random.default_rng(5)
        first = rng.uniform(0.0, 4.0, size=(1000, 2))
        second = rng.uniform(0.0, 4.0, size=(1000, 2))
        lam = rng.uniform(0.0, 1.0, size=(1000, 1))

        # Act
        at_first = dc_components(policy, first)
        at_second = dc_components(policy, second)
        at_mix = dc_components(policy, lam * first + (1.0 - lam) * second)

        # Assert
        for term in range(2):
            chord = lam * at_first[term] + (1.0 - lam) * at_second[term]
            self.assertTrue(np.all(at_mix[term] <= chord + 1e-9 * (1.0 + np.abs(chord))))
        np.testing.assert_allclose(at_first[0] - at_first[1], apply_policy_batch(policy, first))

    def test_pointwise_baseline(self):
        # Act
        policy = fit_pointwise_baseline(self.dataset, PolicyOptions(backend="highs"))

        # Assert
        self.assertEqual(policy.num_cells, len(self.dataset))
        self.assertEqual(policy.metadata["kind"], "pointwise")
        self.assertLessEqual(policy.metadata["max_recovery_error"], 1e-6)

    def test_single_point_is_constant(self):
        # Arrange
        dataset = two_cone_dataset([[3.0, 1.0]])

        # Act
        policy = fit_pointwise_baseline(dataset)

        # Assert
        x_hat, _ = apply_policy(policy, [1.0, 3.0])
        np.testing.assert_allclose(x_hat, [2.0, 0.0, 1.0, 0.0, 0.0], atol=1e-12)

    def test_too_many_pairs(self):
        with self.assertRaises(TooLarge):
            fit_policy(self.dataset, PolicyOptions(max_pairs=10))

    def test_fallback_retries_relaxed(self):
        # Arrange
        relaxed_policy = MagicMock(spec=PLDCPolicy)
        with patch(
            "services.policy_service.fit_policy", side_effect=[TrainingInfeasible("no fit"), relaxed_policy]
        ) as fit:
            # Act
            result = fit_policy_with_fallback(self.dataset, PolicyOptions())

        # Assert
        self.assertIs(result, relaxed_policy)
        self.assertEqual(fit.call_count, 2)
        self.assertTrue(fit.call_args_list[1].args[1].relaxed)


class TestTrainingProblem(unittest.TestCase):
    def setUp(self):
        self.dataset = two_cone_dataset()
        self.cells = assign_cells(self.dataset)
        # break affinity inside the first cell
        self.cells[0].targets[-1, 0] += 1.0

    def test_shape(self):
        # Act
        problem = build_training_lp(self.dataset, self.cells)

        # Assert
        n = len(self.dataset)
        self.assertEqual(problem.num_pairs, n * (n - 1))
        self.assertEqual(problem.num_rows, 2 * n * (n - 1))
        self.assertEqual(problem.num_cols, 4 * 2 * 2 + 2 * n)
        self.assertEqual(len(problem.rhs), TWO_CONE_C.size + 1)

    def test_corrupted_targets_are_infeasible_in_plain_mode(self):
        # Arrange
        problem = build_training_lp(self.dataset, self.cells, PolicyOptions())

        # Act
        solution = solve_lp(problem.to_linear_program(0))

        # Assert
        self.assertIs(solution.status, LpStatus.INFEASIBLE)

    def test_relaxed_mode_absorbs_corruption(self):
        # Arrange
        problem = build_training_lp(self.dataset, self.cells, PolicyOptions(relaxed=True))

        # Act
        solution = solve_lp(problem.to_linear_program(0))

        # Assert
        self.assertIs(solution.status, LpStatus.OPTIMAL)
        slack = solution.x[problem.offsets()["slack"] : problem.num_cols]
        self.assertGreater(float(slack.max()), 1e-6)

    def test_pruned_pairs(self):
        # Act
        problem = build_training_lp(self.dataset, self.cells, PolicyOptions(prune="within_cell_plus_anchor"))

        # Assert
        # 5 x 4 ordered pairs inside each cell plus 5 points paired with the other anchor
        self.assertEqual(problem.num_pairs, 2 * 20 + 2 * 5)


class TestApplyPolicy(unittest.TestCase):
    def setUp(self):
        self.policy = fit_policy(two_cone_dataset(), PolicyOptions(backend="highs"))

    def test_batch_matches_single(self):
        # Arrange
        B = np.array([[2.2, 1.4], [1.1, 2.9], [2.6, 2.6]])

        # Act
        batch = apply_policy_batch(self.policy, B)

        # Assert
        for b, row in zip(B, batch):
            x_hat, eta_hat = apply_policy(self.policy, b)
            np.testing.assert_allclose(row[:-1], x_hat, atol=1e-12)
            self.assertAlmostEqual(row[-1], eta_hat, places=12)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatch):
            apply_policy(self.policy, [1.0, 2.0, 3.0])

    def test_empty_policy(self):
        # Arrange
        empty = PLDCPolicy(
            cells=[],
            u=np.zeros((0, 6, 2)),
            v=np.zeros((0, 6, 2)),
            z=np.zeros((0, 6)),
            anchor_b=np.zeros((0, 2)),
            anchor_y=np.zeros((0, 6)),
            bundle=[],
            c=TWO_CONE_C,
            A=TWO_CONE_A,
        )

        # Act & Assert
        with self.assertRaises(EmptyPolicy):
            apply_policy(empty, [1.0, 2.0])

    def test_corrected_objective_needs_bundle(self):
        with self.assertRaises(EmptyBundle):
            corrected_objective(self.policy, np.zeros(5))

    def test_save_and_load(self):
        # Arrange
        B = np.array([[2.2, 1.4], [1.1, 2.9]])

        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "policy.json")

            # Act
            save_policy(self.policy, path)
            loaded = load_policy(path)

        # Assert
        np.testing.assert_array_equal(apply_policy_batch(loaded, B), apply_policy_batch(self.policy, B))
        self.assertEqual(loaded.metadata["kind"], "pldc")


class TestGaps(unittest.TestCase):
    def test_feasibility_gap(self):
        # Act
        gap = feasibility_gap(TWO_CONE_A, [3.0, 1.0], [2.0, 0.0, 1.0, 0.0, -0.5])

        # Assert
        self.assertAlmostEqual(gap, 0.5, places=12)

    def test_optimality_gap(self):
        self.assertAlmostEqual(optimality_gap(10.5, 9.0), 1.5 / 10.0, places=12)
        self.assertAlmostEqual(optimality_gap(10.5, 9.0, "absolute"), 1.5, places=12)


class TestTwoStagePolicy(unittest.TestCase):
    def setUp(self):
        self.inst = generate_synthetic(preset_spec("pgp2-shape", seed=13))
        rng = np.random.default_rng(13)
        self.rhs = [self.inst.b_nominal * rng.uniform(0.9, 1.1, size=self.inst.m1) for _ in range(8)]
        self.dataset = dataset_from_lshaped(self.inst, self.rhs)

    def test_bundle_gathers_active_cuts(self):
        self.assertGreater(len(self.dataset.bundle), 0)
        self.assertTrue(all(p.source == "LShaped" for p in self.dataset.points))

    def test_policy_is_optimal_on_training_rhs(self):
        # Arrange
        policy = fit_policy_with_fallback(self.dataset)

        # Act
        report = evaluate_policy(policy, self.inst, self.rhs, EvaluationOptions())

        # Assert
        self.assertFalse(policy.metadata["relaxed"])
        self.assertEqual(report.summary["count"], 8)
        self.assertEqual(report.summary["feasible_pct"], 100.0)
        self.assertTrue(all(r.rel_opt_gap >= -1e-6 for r in report.records))
        self.assertTrue(all(r.wall_micros == 0 for r in report.records))

    def test_corrected_objective_bounds_exact_value(self):
        # Arrange
        policy = fit_policy(self.dataset)

        for b in self.rhs:
            x_hat, _ = apply_policy(policy, b)

            # Act
            corrected = corrected_objective(policy, x_hat)

            # Assert
            self.assertLessEqual(corrected, first_stage_objective(self.inst, x_hat) + 1e-9)


class TestRhsOutsideRegion(unittest.TestCase):
    """A is strictly positive, so -b has no x >= 0 with Ax = -b."""

    def setUp(self):
        self.inst = generate_synthetic(preset_spec("pgp2-shape", seed=13))
        self.b = self.inst.b_nominal
        self.sd_opts = SdOptions(min_iter=20, max_iter=60, stall_window=10, seed=3)

    def test_lshaped_dataset_skips_and_counts(self):
        # Act
        dataset = dataset_from_lshaped(self.inst, [self.b, -self.b, 1.05 * self.b])

        # Assert
        self.assertEqual(len(dataset), 2)
        self.assertEqual(dataset.infeasible_rhs, 1)
        np.testing.assert_allclose(dataset.rhs_matrix, [self.b, 1.05 * self.b])

    def test_sd_dataset_skips_and_counts(self):
        # Act
        dataset = dataset_from_sd(self.inst, [-self.b, self.b], self.sd_opts, oos_samples=50)

        # Assert
        self.assertEqual(len(dataset), 1)
        self.assertEqual(dataset.infeasible_rhs, 1)
        self.assertEqual(dataset.points[0].source, "SD")
        self.assertGreater(len(dataset.bundle), 0)

    def test_sd_dataset_without_feasible_rhs(self):
        # Act
        dataset = dataset_from_sd(self.inst, [-self.b], self.sd_opts, oos_samples=50)

        # Assert
        self.assertEqual((len(dataset), dataset.infeasible_rhs), (0, 1))
        self.assertEqual(dataset.bundle, [])

    def test_evaluation_marks_outside_points_infeasible(self):
        # Arrange
        policy = fit_policy_with_fallback(dataset_from_lshaped(self.inst, [self.b, 0.95 * self.b, 1.05 * self.b]))

        with patch("services.policy_service.feasibility_gap", return_value=0.0):
            # Act
            report = evaluate_policy(policy, self.inst, [self.b, -self.b])

        # Assert
        self.assertEqual([r.feasible for r in report.records], [True, False])
        self.assertTrue(math.isnan(report.records[1].rel_opt_gap))
        self.assertEqual(report.summary["feasible_pct"], 50.0)


@unittest.skipUnless(SLOW, "set PLDC_SLOW_TESTS=1 to run validation on hundreds of right-hand sides")
class TestStaticValidation(unittest.TestCase):
    def split_series(self, inst, train, validate, seed=7):
        cfg = RhsGeneratorConfig(horizon=train + validate).resolve(inst.b_nominal, inst.perturbed_rows)
        rhs = sample_rhs(cfg, inst.b_nominal, np.random.default_rng(seed))

        def inside(block):
            return [b for b in block if solve_lp(inst.first_stage_lp(b)).status is LpStatus.OPTIMAL]

        return inside(rhs[:train]), inside(rhs[train:])

    def test_training_and_validation_quality(self):
        # Arrange
        inst = generate_synthetic(preset_spec("pgp2-shape", seed=7))
        train, validate = self.split_series(inst, 640, 160)
        dataset = dataset_from_lshaped(inst, train)
        policy = fit_policy_with_fallback(dataset, PolicyOptions(prune="within_cell_plus_anchor"))
        opts = EvaluationOptions(eps_feas=1e-6, eps_opt=5e-4)

        # Act
        on_training = evaluate_policy(policy, inst, dataset.rhs_matrix, opts)
        on_validation = evaluate_policy(policy, inst, validate, opts)

        # Assert
        self.assertEqual(on_training.summary["feasible_pct"], 100.0)
        self.assertGreaterEqual(on_validation.summary["feasible_pct"], 95.0)
        self.assertGreaterEqual(on_validation.summary["optimal_pct_of_feasible"], 95.0)

    def test_pointwise_baseline_overfits_the_mean_value_problem(self):
        # Arrange
        inst = mean_value_instance(generate_synthetic(preset_spec("pgp2-shape", seed=7)))
        train, validate = self.split_series(inst, 160, 40)
        dataset = dataset_from_lshaped(inst, train)

        # Act
        pldc = evaluate_policy(fit_policy_with_fallback(dataset), inst, validate)
        pointwise = evaluate_policy(fit_pointwise_baseline(dataset, PolicyOptions(relaxed=True)), inst, validate)

        # Assert
        self.assertGreaterEqual(pldc.summary["feasible_pct"], 90.0)
        self.assertLessEqual(pointwise.summary["feasible_pct"], 20.0)


if __name__ == "__main__":
    unittest.main()
