import math

import numpy as np
from django.test import SimpleTestCase, tag

from codesign.design import (
    DesignProblem,
    attack_products,
    bisect_path,
    design_gains,
    design_objective,
    stationarity_residuals,
    sweep_grid,
    tradeoff_sweep,
    trivial_solution_check,
)
from codesign.exceptions import InfeasibleTargetException
from codesign.lti_model import DetectorConfig, GainPair, NoiseTruncation, PlantModel, validate_model
from codesign.performance import SolverConfig, occ_gain, occ_residuals, open_loop_gain
from codesign.reachability import gain_attack_objective
from codesign.tests.fixtures import (
    GAMMA_211_GAINS,
    GAMMA_STAR_GAINS,
    case_study_model,
    random_stable_gains,
    random_stable_model,
)


def case_study_problem(gamma_bar, **extra):
    model = validate_model(case_study_model()).model
    return DesignProblem(
        model=model,
        detector=DetectorConfig(false_alarm_rate=0.05, p=model.p),
        truncation=NoiseTruncation(p_bar=0.95, n=model.n, p=model.p),
        gamma_bar=gamma_bar,
        k_star=35,
        solver=SolverConfig.from_settings(),
        **extra,
    )


def lagrangian(problem, vector, multiplier):
    objective, constraint = design_objective(problem, GainPair.from_vector(vector, problem.model))
    return objective + multiplier * constraint


class StationarityTestCase(SimpleTestCase):
    step = 1e-6

    def check_against_finite_differences(self, problem, gains, multiplier):
        vector = gains.as_vector()
        residuals = stationarity_residuals(problem, gains, multiplier)
        numeric = np.array([
            (lagrangian(problem, vector + self.step * e, multiplier)
             - lagrangian(problem, vector - self.step * e, multiplier)) / (2 * self.step)
            for e in np.eye(vector.size)
        ])
        gradient = residuals[:-1]

        self.assertLessEqual(np.linalg.norm(gradient - numeric) / np.linalg.norm(numeric), 1e-5)
        self.assertAlmostEqual(residuals[-1], design_objective(problem, gains)[1], places=10)

    def test_gradient_matches_finite_differences_on_case_study(self):
        problem = case_study_problem(2.11)

        self.check_against_finite_differences(problem, GAMMA_211_GAINS, 0.7)
        self.check_against_finite_differences(problem, GAMMA_STAR_GAINS, -1.3)

    def test_gradient_matches_finite_differences_on_random_models(self):
        rng = np.random.default_rng(5)
        for trial in range(5):
            n = 2 + trial % 2
            model = random_stable_model(rng, n)
            gains = random_stable_gains(rng, model, scale=0.3)
            problem = DesignProblem(
                model=model, detector=None, truncation=None, gamma_bar=1.0,
                k_star=20, solver=SolverConfig.from_settings(),
            )
            self.check_against_finite_differences(problem, gains, 0.5)

    def test_objective_vanishes_without_feedback(self):
        problem = case_study_problem(2.11)
        objective, _ = design_objective(problem, GainPair.zero(problem.model))

        self.assertEqual(objective, 0.0)

    def test_constraint_vanishes_at_open_loop(self):
        problem = case_study_problem(open_loop_gain(validate_model(case_study_model()).model))
        _, constraint = design_objective(problem, GainPair.zero(problem.model))

        self.assertAlmostEqual(constraint, 0.0, delta=1e-3)

    def test_objective_matches_steady_state_evaluation(self):
        problem = case_study_problem(2.11)
        objective, _ = design_objective(problem, GAMMA_211_GAINS)

        self.assertAlmostEqual(
            objective, gain_attack_objective(problem.model, GAMMA_211_GAINS, 35), delta=1e-4 * objective
        )


class TradeoffIntervalTestCase(SimpleTestCase):
    def test_open_loop_target_gives_trivial_point(self):
        problem = case_study_problem(open_loop_gain(validate_model(case_study_model()).model))
        point = design_gains(problem)

        self.assertEqual(point.attack_objective, 0.0)
        self.assertEqual(float(np.abs(point.gains.as_vector()).max()), 0.0)
        self.assertAlmostEqual(point.sqrt_trace_qstar, 8.92, delta=0.1)

    def test_target_slightly_above_open_loop_is_clamped(self):
        gamma_open_loop = open_loop_gain(validate_model(case_study_model()).model)
        problem = case_study_problem(gamma_open_loop * 1.005)

        with self.assertLogs('codesign.design', level='WARNING'):
            point = design_gains(problem)

        self.assertEqual(len(point.warnings), 1)
        self.assertIn('clamped', point.warnings[0])
        self.assertAlmostEqual(point.gamma, gamma_open_loop, places=12)
        self.assertEqual(point.attack_objective, 0.0)

    def test_target_above_open_loop_raises_exception(self):
        with self.assertRaises(InfeasibleTargetException) as context:
            design_gains(case_study_problem(12.0))

        self.assertAlmostEqual(context.exception.gamma_open_loop, 10.18, delta=0.05)

    def test_target_below_minimum_raises_exception(self):
        problem = case_study_problem(1.0, gamma_star=1.57, reference_gains=GAMMA_STAR_GAINS)

        with self.assertRaises(InfeasibleTargetException) as context:
            design_gains(problem)

        self.assertEqual(context.exception.gamma_star, 1.57)

    def test_target_at_minimum_returns_minimum_pair(self):
        problem = case_study_problem(1.5695, gamma_star=1.57, reference_gains=GAMMA_STAR_GAINS)
        point = design_gains(problem)
        expected = np.abs(occ_residuals(problem.model, GAMMA_STAR_GAINS.as_vector(), 35)).max()

        self.assertIsNone(point.multiplier)
        self.assertEqual(point.status, 'minimum_gain')
        self.assertAlmostEqual(point.residual_norm, float(expected), places=12)
        self.assertGreater(point.residual_norm, 0.0)
        self.assertTrue(any('minimum gain' in warning for warning in point.warnings))
        np.testing.assert_array_equal(point.gains.as_vector(), GAMMA_STAR_GAINS.as_vector())
        self.assertAlmostEqual(point.sqrt_trace_qstar, 16.82, delta=0.3)

    def test_sweep_grid(self):
        grid = sweep_grid(1.6, 10.18, 12)

        self.assertEqual(len(grid), 12)
        self.assertEqual(grid[0], 1.6)
        self.assertAlmostEqual(grid[-1], 10.18, places=12)
        self.assertTrue(all(b > a for a, b in zip(grid, grid[1:])))
        self.assertEqual(sweep_grid(2.0, 3.0, 1), [2.0])
        self.assertEqual(sweep_grid(2.0, 3.0, 2), [2.0, 3.0])

    @tag('slow')
    def test_intermediate_target_beats_reference_gains(self):
        problem = case_study_problem(2.11)
        point = design_gains(problem)
        reference = gain_attack_objective(problem.model, GAMMA_211_GAINS, 35)

        self.assertEqual(point.status, 'completed')
        self.assertAlmostEqual(occ_gain(problem.model, point.gains).gamma, 2.11, delta=1e-3)
        self.assertLessEqual(point.attack_objective, reference * 1.01)

    @tag('slow')
    def test_design_ignores_detector_threshold_and_truncation(self):
        base = design_gains(case_study_problem(2.11))
        model = validate_model(case_study_model()).model
        alpha = DetectorConfig(false_alarm_rate=0.05, p=2).alpha
        other = design_gains(DesignProblem(
            model=model,
            detector=DetectorConfig(false_alarm_rate=0.05, p=2, alpha=10 * alpha),
            truncation=NoiseTruncation(p_bar=0.99, n=2, p=2),
            gamma_bar=2.11,
            k_star=35,
            solver=SolverConfig.from_settings(),
        ))

        self.assertEqual(base.gains.as_vector().tobytes(), other.gains.as_vector().tobytes())
        self.assertGreater(other.sqrt_trace_qstar, base.sqrt_trace_qstar)

    @tag('slow')
    def test_sweep_is_monotone(self):
        model = validate_model(case_study_model()).model
        points = tradeoff_sweep(
            model,
            DetectorConfig(false_alarm_rate=0.05, p=2),
            NoiseTruncation(p_bar=0.95, n=2, p=2),
            1.6,
            open_loop_gain(model),
            12,
            SolverConfig.from_settings(),
            35,
        )
        completed = [point for point in points if point.status == 'completed']

        self.assertEqual(len(points), 12)
        for previous, current in zip(completed, completed[1:]):
            self.assertLessEqual(current.sqrt_trace_qstar, previous.sqrt_trace_qstar * (1 + 1e-3))
        self.assertAlmostEqual(points[-1].sqrt_trace_qstar, 8.92, delta=0.1)


class TrivialSolutionTestCase(SimpleTestCase):
    def test_case_study_pairs_annihilate_attack_path(self):
        model = validate_model(case_study_model()).model
        diagnostic = trivial_solution_check(model)
        payload = diagnostic.to_payload()

        self.assertEqual(payload['generic'], 'L = 0 or K = 0')
        self.assertEqual(payload['g_rank'], 2)
        self.assertTrue(payload['gk_zero_forces_k_zero'])
        self.assertFalse(payload['every_k_trivial'])
        self.assertEqual(len(diagnostic.pairs), 2)
        for pair in diagnostic.pairs:
            self.assertGreater(np.abs(pair.gains.L).max(), 0.0)
            self.assertGreater(np.abs(pair.gains.K).max(), 0.0)
            self.assertLess(pair.max_product, 1e-9)

    def test_rank_deficient_input_matrix(self):
        model = PlantModel(
            [[0.5, 0.1], [0.0, 0.3]], [[1.0, 1.0], [1.0, 1.0]], np.eye(2), 0.1 * np.eye(2), 0.1 * np.eye(2)
        )
        diagnostic = trivial_solution_check(model)
        sources = [pair.source for pair in diagnostic.pairs]

        self.assertEqual(diagnostic.g_rank, 1)
        self.assertFalse(diagnostic.full_column_rank)
        self.assertIn('input_null_space', sources)
        for pair in diagnostic.pairs:
            self.assertLess(attack_products(model, pair.gains), 1e-9)

    def test_rotation_has_no_system_specific_pairs(self):
        angle = 0.7
        rotation = 0.9 * np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])
        model = PlantModel(rotation, np.eye(2), np.eye(2), 0.1 * np.eye(2), 0.1 * np.eye(2))

        self.assertEqual(trivial_solution_check(model).pairs, [])

    def test_zero_gain_products(self):
        model = validate_model(case_study_model()).model

        self.assertEqual(attack_products(model, GainPair.zero(model)), 0.0)
        self.assertGreater(attack_products(model, GAMMA_211_GAINS), 0.0)


@tag('slow')
class DesignOracleTestCase(SimpleTestCase):
    def setUp(self):
        self.model = validate_model(case_study_model()).model

    def sweep(self, warm):
        return tradeoff_sweep(
            self.model,
            DetectorConfig(false_alarm_rate=0.05, p=2),
            NoiseTruncation(p_bar=0.95, n=2, p=2),
            1.6,
            open_loop_gain(self.model),
            8,
            SolverConfig.from_settings(starts=8),
            35,
            warm=warm,
        )

    def test_target_near_minimum_converges(self):
        point = design_gains(case_study_problem(1.59))

        self.assertEqual(point.status, 'completed')
        self.assertAlmostEqual(occ_gain(self.model, point.gains).gamma, 1.59, delta=1e-3)
        self.assertIsNotNone(point.multiplier)

    def test_design_dominates_random_search(self):
        point = design_gains(case_study_problem(2.11))
        rng = np.random.default_rng(17)
        objectives = []
        for _ in range(200):
            vector = GAMMA_STAR_GAINS.as_vector() + 0.2 * rng.standard_normal(8)
            candidate = GainPair.from_vector(vector, self.model)
            if not candidate.is_stable(self.model) or occ_gain(self.model, candidate).gamma > 2.11:
                continue
            candidate = bisect_path(self.model, candidate, 2.11, scale_l=True, scale_k=True)
            if abs(occ_gain(self.model, candidate).gamma - 2.11) > 1e-6:
                continue
            objectives.append(gain_attack_objective(self.model, candidate, 35))

        self.assertGreaterEqual(len(objectives), 10)
        self.assertGreaterEqual(min(objectives), point.attack_objective * (1 - 1e-3))

    def test_warm_sweep_never_loses_to_cold_sweep(self):
        warm, cold = self.sweep(True), self.sweep(False)

        self.assertEqual([point.gamma_bar for point in warm], [point.gamma_bar for point in cold])
        for with_warm, without in zip(warm, cold):
            if with_warm.status == 'completed' and without.status == 'completed':
                self.assertLessEqual(
                    with_warm.attack_objective, without.attack_objective * (1 + 1e-9) + 1e-12
                )
