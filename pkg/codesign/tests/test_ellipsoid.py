from itertools import combinations

import numpy as np
from django.test import SimpleTestCase, tag
from scipy.spatial import ConvexHull

from codesign.ellipsoid import (
    Ellipsoid,
    GeometricSumService,
    PairWeights,
    SupportDirection,
    direction_grid,
)
from codesign.exceptions import (
    DimensionMismatchException,
    InvalidDirectionException,
    InvalidWeightException,
    NotPositiveSemidefiniteException,
)


def random_psd(rng, n, rank=None):
    factor = rng.standard_normal((n, rank or n))
    return factor @ factor.T


class EllipsoidTestCase(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(7)

    def test_support_of_ball(self):
        ball = Ellipsoid.ball(3, radius=2.0)
        ell = SupportDirection.normalized([1.0, 2.0, -1.0])

        self.assertAlmostEqual(ball.support(ell), 2.0)

    def test_support_includes_center(self):
        ellipsoid = Ellipsoid(np.diag([4.0, 1.0]), center=[1.0, -1.0])

        self.assertAlmostEqual(ellipsoid.support([1.0, 0.0]), 3.0)
        self.assertAlmostEqual(ellipsoid.support([0.0, -1.0]), 2.0)

    def test_linear_map_support_matches_quadratic_form(self):
        shape = random_psd(self.rng, 3)
        a = self.rng.standard_normal((2, 3))
        image = Ellipsoid(shape).linear_map(a)

        for ell in direction_grid(2, 12):
            expected = np.sqrt(ell @ a @ shape @ a.T @ ell)
            self.assertAlmostEqual(image.support(ell), expected, places=10)

    def test_linear_map_rejects_wrong_columns(self):
        with self.assertRaises(DimensionMismatchException):
            Ellipsoid.ball(3).linear_map(np.eye(2))

    def test_non_unit_direction_raises_exception(self):
        with self.assertRaises(InvalidDirectionException):
            Ellipsoid.ball(2).support([1.0, 1.0])

    def test_indefinite_shape_raises_exception(self):
        with self.assertRaises(NotPositiveSemidefiniteException):
            Ellipsoid(np.diag([1.0, -0.5]))

    def test_small_negative_eigenvalue_is_tolerated(self):
        ellipsoid = Ellipsoid(np.diag([1.0, -1e-12]))

        self.assertEqual(ellipsoid.dimension, 2)

    def test_flat_shape_membership(self):
        segment = Ellipsoid(np.diag([1.0, 0.0]))

        self.assertTrue(segment.contains_point([0.5, 0.0]))
        self.assertTrue(segment.contains_point([1.0, 0.0]))
        self.assertFalse(segment.contains_point([0.5, 0.1]))
        self.assertFalse(segment.contains_point([1.5, 0.0]))

    def test_principal_axes_are_sorted(self):
        lengths, axes = Ellipsoid(np.diag([1.0, 9.0])).principal_axes()

        np.testing.assert_allclose(lengths, [3.0, 1.0])
        self.assertAlmostEqual(abs(axes[1, 0]), 1.0)


class PairWeightsTestCase(SimpleTestCase):
    def test_nonpositive_weight_raises_exception(self):
        with self.assertRaises(InvalidWeightException):
            PairWeights({(0, 1): 0.0})

    def test_unordered_pair_raises_exception(self):
        with self.assertRaises(InvalidWeightException):
            PairWeights({(1, 0): 1.0})

    def test_missing_pair_raises_exception(self):
        shapes = [np.eye(2), np.eye(2), np.eye(2)]

        with self.assertRaises(InvalidWeightException):
            GeometricSumService.outer_bound(shapes, PairWeights({(0, 1): 1.0, (0, 2): 1.0}))


class GeometricSumServiceTestCase(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(11)
        self.shapes = [random_psd(rng, 2), random_psd(rng, 2, rank=1), random_psd(rng, 2)]
        self.traces = [np.trace(shape) for shape in self.shapes]
        self.directions = direction_grid(2, 64)

    def test_boundary_point_attains_support(self):
        for ell in self.directions:
            point = GeometricSumService.minkowski_boundary_point(self.shapes, ell)
            expected = GeometricSumService.support_of_sum(self.shapes, ell)
            self.assertAlmostEqual(float(ell @ point), expected, places=10)

    def test_boundary_point_of_degenerate_members_is_zero(self):
        point = GeometricSumService.minkowski_boundary_point([np.zeros((2, 2))] * 2, [1.0, 0.0])

        np.testing.assert_array_equal(point, np.zeros(2))

    def test_outer_bound_contains_exact_sum(self):
        weights = PairWeights({(0, 1): 0.3, (0, 2): 2.0, (1, 2): 1.7})
        bound = GeometricSumService.outer_bound(self.shapes, weights)

        for ell in self.directions:
            exact = GeometricSumService.support_of_sum(self.shapes, ell)
            self.assertGreaterEqual(bound.support(ell), exact - 1e-10)

    def test_min_trace_sum_trace(self):
        bound = GeometricSumService.min_trace_sum(self.shapes)
        expected = sum(np.sqrt(trace) for trace in self.traces) ** 2

        self.assertAlmostEqual(bound.trace, expected, places=9)

    def test_min_trace_sum_matches_optimal_weights(self):
        weights = PairWeights.optimal(self.traces)
        bound = GeometricSumService.outer_bound(self.shapes, weights)

        np.testing.assert_allclose(
            bound.shape, GeometricSumService.min_trace_sum(self.shapes).shape, rtol=1e-12
        )

    def test_optimal_weights_are_a_trace_minimum(self):
        weights = PairWeights.optimal(self.traces)
        optimum = GeometricSumService.outer_bound_trace(self.traces, weights)

        for pair in weights.values:
            for delta in (-1e-3, 1e-3):
                moved = GeometricSumService.outer_bound_trace(self.traces, weights.perturbed(pair, delta))
                self.assertGreater(moved, optimum)

        hessian = GeometricSumService.trace_hessian_diagonal(self.traces, weights)
        self.assertTrue(all(value > 0 for value in hessian.values()))

    def test_directional_sum_is_tangent(self):
        ell = SupportDirection.from_angle(0.4)
        bound = GeometricSumService.directional_sum(self.shapes, ell)

        self.assertAlmostEqual(
            bound.support(ell), GeometricSumService.support_of_sum(self.shapes, ell), places=10
        )
        for other in self.directions:
            exact = GeometricSumService.support_of_sum(self.shapes, other)
            self.assertGreaterEqual(bound.support(other), exact - 1e-10)

    def test_degenerate_members_are_dropped(self):
        shapes = self.shapes + [1e-20 * np.eye(2)]

        np.testing.assert_allclose(
            GeometricSumService.min_trace_sum(shapes).shape,
            GeometricSumService.min_trace_sum(self.shapes).shape,
        )

    def test_all_zero_members_give_zero_ellipsoid(self):
        bound = GeometricSumService.min_trace_sum([np.zeros((3, 3))] * 4)

        self.assertEqual(bound.trace, 0.0)
        self.assertEqual(bound.dimension, 3)

    def test_mismatched_shapes_raise_exception(self):
        with self.assertRaises(DimensionMismatchException):
            GeometricSumService.min_trace_sum([np.eye(2), np.eye(3)])


class DirectionGridTestCase(SimpleTestCase):
    def test_planar_grid_starts_at_angle_zero(self):
        grid = direction_grid(2, 8)

        self.assertEqual(grid.shape, (8, 2))
        np.testing.assert_allclose(grid[0], [1.0, 0.0])
        np.testing.assert_allclose(grid[2], [0.0, 1.0], atol=1e-15)

    def test_higher_dimensional_grid_is_unit_and_reproducible(self):
        first = direction_grid(4, 50, seed=3)
        second = direction_grid(4, 50, seed=3)

        np.testing.assert_allclose(np.linalg.norm(first, axis=1), 1.0)
        np.testing.assert_array_equal(first, second)


def boundary_samples(shape, count):
    angles = 2 * np.pi * np.arange(count) / count
    circle = np.column_stack([np.cos(angles), np.sin(angles)])
    return circle @ np.linalg.cholesky(shape).T


def hull_of_sum(shapes, count):
    points = np.zeros((1, 2))
    for shape in shapes:
        summed = (points[:, np.newaxis, :] + boundary_samples(shape, count)[np.newaxis, :, :]).reshape(-1, 2)
        points = summed[ConvexHull(summed).vertices]
    return points


class TightnessTestCase(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(23)
        self.shapes = [random_psd(rng, 2) for _ in range(6)]
        self.directions = direction_grid(2, 3600)
        self.bound = GeometricSumService.min_trace_sum(self.shapes)

    def test_min_trace_sum_keeps_a_strict_margin(self):
        gaps = [
            self.bound.support(ell) - GeometricSumService.support_of_sum(self.shapes, ell)
            for ell in self.directions
        ]

        self.assertGreater(min(gaps), 0.0)

    def test_directional_sums_cost_more_trace(self):
        margins = [
            GeometricSumService.directional_sum(self.shapes, ell).trace - self.bound.trace
            for ell in self.directions
        ]

        self.assertGreater(min(margins), 0.0)

    def test_directional_sum_touches_its_own_direction(self):
        tolerance = 1e-6 * np.sqrt(self.bound.trace)

        for ell in self.directions[::60]:
            bound = GeometricSumService.directional_sum(self.shapes, ell)
            gap = bound.support(ell) - GeometricSumService.support_of_sum(self.shapes, ell)
            self.assertLessEqual(abs(gap), tolerance)


@tag('slow')
class SamplingOracleTestCase(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(31)

    def test_support_matches_sampled_boundary(self):
        for _ in range(5):
            ellipsoid = Ellipsoid(random_psd(self.rng, 2))
            points = boundary_samples(ellipsoid.shape, 20000)
            for ell in direction_grid(2, 90):
                sampled = float(np.max(points @ ell))
                exact = ellipsoid.support(ell)
                self.assertLessEqual(sampled, exact + 1e-12)
                self.assertGreaterEqual(sampled, exact * (1 - 1e-4))

    def test_support_of_sum_matches_brute_force_hull(self):
        directions = direction_grid(2, 720)
        for _ in range(5):
            shapes = [random_psd(self.rng, 2) for _ in range(4)]
            hull = hull_of_sum(shapes, 360)
            exact = np.array([GeometricSumService.support_of_sum(shapes, ell) for ell in directions])
            sampled = np.max(hull @ directions.T, axis=0)
            self.assertLessEqual(np.max(np.abs(exact - sampled)), 1e-3 * np.max(exact))

    def test_bounds_contain_sampled_sums(self):
        shapes = [random_psd(self.rng, 2) for _ in range(4)]
        factors = [np.linalg.cholesky(shape) for shape in shapes]
        radii = np.sqrt(self.rng.uniform(size=(10000, len(shapes))))
        angles = self.rng.uniform(0, 2 * np.pi, size=(10000, len(shapes)))
        points = sum(
            (radii[:, [index]] * np.column_stack([np.cos(angles[:, index]), np.sin(angles[:, index])])) @ factor.T
            for index, factor in enumerate(factors)
        )
        bound = GeometricSumService.min_trace_sum(shapes)
        weighted = GeometricSumService.outer_bound(
            shapes, PairWeights({pair: float(self.rng.uniform(0.2, 5.0)) for pair in combinations(range(4), 2)})
        )

        for point in points[:2000]:
            self.assertTrue(bound.contains_point(point))
            self.assertTrue(weighted.contains_point(point))
        self.assertTrue(np.all(bound.quadratic_forms(points) <= 1.0 + 1e-9))

    def test_min_trace_sum_beats_random_weights(self):
        shapes = [random_psd(self.rng, 3) for _ in range(4)]
        optimum = GeometricSumService.min_trace_sum(shapes).trace
        pairs = list(combinations(range(4), 2))

        for _ in range(1000):
            weights = PairWeights({pair: float(np.exp(self.rng.uniform(-3, 3))) for pair in pairs})
            trace = GeometricSumService.outer_bound(shapes, weights).trace
            self.assertGreaterEqual(trace, optimum * (1 - 1e-12))
