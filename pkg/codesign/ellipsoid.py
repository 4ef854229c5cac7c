"""
Ellipsoid calculus: support functions, linear images and outer bounds of
geometric (Minkowski) sums of centered ellipsoids.

An ellipsoid E(Q, c) is {x : (x - c)^T Q^+ (x - c) <= 1} with Q symmetric PSD.
Degenerate (flat or zero) shapes are allowed everywhere.
"""

import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Sequence, Tuple

import numpy as np
from django.conf import settings
from scipy.stats import norm, qmc

from .exceptions import (
    DimensionMismatchException,
    InvalidDirectionException,
    InvalidWeightException,
    NotPositiveSemidefiniteException,
)

logger = logging.getLogger(__name__)

TRACE_EPS = settings.CODESIGN['TRACE_EPS']
PSD_TOLERANCE = settings.CODESIGN['PSD_TOLERANCE']
MEMBERSHIP_TOLERANCE = settings.CODESIGN['MEMBERSHIP_TOLERANCE']
DIRECTION_TOLERANCE = 1e-12


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    return (matrix + matrix.T) / 2


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float)
    array.setflags(write=False)
    return array


def as_direction(ell) -> np.ndarray:
    """Return ``ell`` as a float vector after checking it has unit length."""
    if isinstance(ell, SupportDirection):
        return ell.ell
    vector = np.asarray(ell, dtype=float).reshape(-1)
    if abs(np.linalg.norm(vector) - 1.0) > DIRECTION_TOLERANCE:
        raise InvalidDirectionException(
            f"Support direction must be a unit vector, got norm {np.linalg.norm(vector):.3e}"
        )
    return vector


@dataclass(frozen=True)
class SupportDirection:
    ell: np.ndarray

    def __post_init__(self):
        vector = np.asarray(self.ell, dtype=float).reshape(-1)
        if abs(np.linalg.norm(vector) - 1.0) > DIRECTION_TOLERANCE:
            raise InvalidDirectionException(
                f"Support direction must be a unit vector, got norm {np.linalg.norm(vector):.3e}"
            )
        object.__setattr__(self, 'ell', _frozen(vector))

    @classmethod
    def normalized(cls, vector) -> 'SupportDirection':
        vector = np.asarray(vector, dtype=float).reshape(-1)
        return cls(vector / np.linalg.norm(vector))

    @classmethod
    def from_angle(cls, angle: float) -> 'SupportDirection':
        return cls(np.array([np.cos(angle), np.sin(angle)]))


@dataclass(frozen=True)
class Ellipsoid:
    shape: np.ndarray
    center: np.ndarray = None

    def __post_init__(self):
        shape = np.atleast_2d(np.asarray(self.shape, dtype=float))
        if shape.ndim != 2 or shape.shape[0] != shape.shape[1]:
            raise DimensionMismatchException(
                f"Shape matrix must be square, got {shape.shape}"
            )
        n = shape.shape[0]
        if self.center is None:
            center = np.zeros(n)
        else:
            center = np.asarray(self.center, dtype=float).reshape(-1)
        if center.shape != (n,):
            raise DimensionMismatchException(
                f"Center has {center.shape[0]} entries but shape is {n}x{n}"
            )

        shape = symmetrize(shape)
        trace = float(np.trace(shape))
        smallest = float(np.linalg.eigvalsh(shape).min())
        if smallest < -PSD_TOLERANCE * abs(trace):
            raise NotPositiveSemidefiniteException(
                f"Shape matrix has eigenvalue {smallest:.3e} below tolerance (trace {trace:.3e})"
            )

        object.__setattr__(self, 'shape', _frozen(shape))
        object.__setattr__(self, 'center', _frozen(center))

    @classmethod
    def zero(cls, n: int) -> 'Ellipsoid':
        return cls(np.zeros((n, n)))

    @classmethod
    def ball(cls, n: int, radius: float = 1.0) -> 'Ellipsoid':
        return cls(radius ** 2 * np.eye(n))

    @property
    def dimension(self) -> int:
        return self.shape.shape[0]

    @property
    def trace(self) -> float:
        return float(np.trace(self.shape))

    def support(self, ell) -> float:
        """Largest projection of the ellipsoid onto the unit direction ``ell``."""
        ell = as_direction(ell)
        self._check_vector(ell, 'direction')
        quadratic = float(ell @ self.shape @ ell)
        return float(np.sqrt(max(quadratic, 0.0)) + ell @ self.center)

    def linear_map(self, a: np.ndarray) -> 'Ellipsoid':
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if a.shape[1] != self.dimension:
            raise DimensionMismatchException(
                f"Map with {a.shape[1]} columns cannot act on a {self.dimension}-dimensional ellipsoid"
            )
        return Ellipsoid(a @ self.shape @ a.T, a @ self.center)

    def quadratic_form(self, x: np.ndarray) -> float:
        """(x - c)^T Q^+ (x - c), or ``inf`` when x leaves the range of a flat shape."""
        x = np.asarray(x, dtype=float).reshape(-1)
        self._check_vector(x, 'point')
        return float(self.quadratic_forms(x[np.newaxis, :])[0])

    def quadratic_forms(self, points: np.ndarray) -> np.ndarray:
        """Row-wise ``quadratic_form`` for an (N, n) array of points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        if points.shape[1] != self.dimension:
            raise DimensionMismatchException(
                f"Points have {points.shape[1]} coordinates, ellipsoid is {self.dimension}-dimensional"
            )
        offsets = points - self.center
        eigenvalues, eigenvectors = np.linalg.eigh(self.shape)
        scale = max(float(eigenvalues.max()), 0.0)
        kept = eigenvalues > 1e-12 * scale if scale > 0 else np.zeros_like(eigenvalues, dtype=bool)

        coordinates = offsets @ eigenvectors
        forms = np.sum(coordinates[:, kept] ** 2 / eigenvalues[kept], axis=1)
        residual = np.linalg.norm(coordinates[:, ~kept], axis=1)
        outside = residual > MEMBERSHIP_TOLERANCE * (1.0 + np.linalg.norm(offsets, axis=1))
        return np.where(outside, np.inf, forms)

    def contains_point(self, x: np.ndarray) -> bool:
        return self.quadratic_form(x) <= 1.0 + MEMBERSHIP_TOLERANCE

    def principal_axes(self) -> Tuple[np.ndarray, np.ndarray]:
        """Semi-axis lengths (descending) and the matching unit axes as columns."""
        eigenvalues, eigenvectors = np.linalg.eigh(self.shape)
        order = np.argsort(eigenvalues)[::-1]
        lengths = np.sqrt(np.clip(eigenvalues[order], 0.0, None))
        return lengths, eigenvectors[:, order]

    def _check_vector(self, vector: np.ndarray, name: str) -> None:
        if vector.shape != (self.dimension,):
            raise DimensionMismatchException(
                f"{name.capitalize()} has {vector.shape[0]} entries, ellipsoid is {self.dimension}-dimensional"
            )


@dataclass(frozen=True)
class PairWeights:
    """Positive weights p_ij for index pairs i < j (0-based) of a geometric sum."""

    values: Dict[Tuple[int, int], float] = field(default_factory=dict)

    def __post_init__(self):
        checked = {}
        for pair, weight in self.values.items():
            i, j = (int(index) for index in pair)
            if not 0 <= i < j:
                raise InvalidWeightException(f"Pair {pair} is not an ordered pair i < j")
            if not np.isfinite(weight) or weight <= 0:
                raise InvalidWeightException(f"Weight for pair {pair} must be positive, got {weight}")
            checked[(i, j)] = float(weight)
        object.__setattr__(self, 'values', checked)

    @classmethod
    def optimal(cls, traces: Sequence[float]) -> 'PairWeights':
        """The minimum-trace choice p*_ij = sqrt(tr Q_j / tr Q_i)."""
        return cls({
            (i, j): float(np.sqrt(traces[j] / traces[i]))
            for i, j in combinations(range(len(traces)), 2)
        })

    @classmethod
    def directional(cls, supports: Sequence[float]) -> 'PairWeights':
        """The weights that make the bound tangent along one direction."""
        return cls({
            (i, j): float(supports[j] / supports[i])
            for i, j in combinations(range(len(supports)), 2)
        })

    def require_complete(self, k: int) -> None:
        missing = [pair for pair in combinations(range(k), 2) if pair not in self.values]
        if missing:
            raise InvalidWeightException(f"Missing weights for pairs {missing}")
        extra = [pair for pair in self.values if pair[1] >= k]
        if extra:
            raise InvalidWeightException(f"Weights given for pairs {extra} outside {k} shapes")

    def perturbed(self, pair: Tuple[int, int], delta: float) -> 'PairWeights':
        values = dict(self.values)
        values[pair] = values[pair] + delta
        return PairWeights(values)


class GeometricSumService:
    @staticmethod
    def _stack(shapes: Sequence[np.ndarray]) -> List[np.ndarray]:
        if not len(shapes):
            raise DimensionMismatchException("A geometric sum needs at least one shape matrix")
        matrices = [np.atleast_2d(np.asarray(shape, dtype=float)) for shape in shapes]
        n = matrices[0].shape[0]
        for index, matrix in enumerate(matrices):
            if matrix.shape != (n, n):
                raise DimensionMismatchException(
                    f"Shape {index} is {matrix.shape}, expected {(n, n)}"
                )
        return matrices

    @staticmethod
    def retained(shapes: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Members whose trace is not negligible against the largest trace."""
        matrices = GeometricSumService._stack(shapes)
        traces = [float(np.trace(matrix)) for matrix in matrices]
        largest = max(traces)
        if largest <= 0:
            return []
        return [matrix for matrix, trace in zip(matrices, traces) if trace >= TRACE_EPS * largest]

    @staticmethod
    def support_of_sum(shapes: Sequence[np.ndarray], ell) -> float:
        """Support function of the exact geometric sum along ``ell``."""
        ell = as_direction(ell)
        matrices = GeometricSumService._stack(shapes)
        return float(sum(np.sqrt(max(float(ell @ matrix @ ell), 0.0)) for matrix in matrices))

    @staticmethod
    def minkowski_boundary_point(shapes: Sequence[np.ndarray], ell) -> np.ndarray:
        ell = as_direction(ell)
        matrices = GeometricSumService._stack(shapes)
        n = matrices[0].shape[0]
        if ell.shape != (n,):
            raise DimensionMismatchException(f"Direction has {ell.shape[0]} entries, shapes are {n}x{n}")

        point = np.zeros(n)
        members = GeometricSumService.retained(matrices)
        if not members:
            return point
        threshold = TRACE_EPS * max(float(np.trace(matrix)) for matrix in members)
        for matrix in members:
            projected = matrix @ ell
            quadratic = float(ell @ projected)
            if quadratic > threshold:
                point += projected / np.sqrt(quadratic)
        return point

    @staticmethod
    def outer_bound(shapes: Sequence[np.ndarray], weights: PairWeights) -> Ellipsoid:
        matrices = GeometricSumService._stack(shapes)
        weights.require_complete(len(matrices))

        bound = sum(matrices)
        for (i, j), weight in weights.values.items():
            bound = bound + weight * matrices[i] + matrices[j] / weight
        return Ellipsoid(symmetrize(bound))

    @staticmethod
    def outer_bound_trace(traces: Sequence[float], weights: PairWeights) -> float:
        weights.require_complete(len(traces))
        total = float(sum(traces))
        for (i, j), weight in weights.values.items():
            total += weight * traces[i] + traces[j] / weight
        return total

    @staticmethod
    def trace_hessian_diagonal(traces: Sequence[float], weights: PairWeights) -> Dict[Tuple[int, int], float]:
        """Second derivatives of tr(Q) in each p_ij; the Hessian is diagonal."""
        weights.require_complete(len(traces))
        return {
            (i, j): 2.0 * traces[j] / weight ** 3
            for (i, j), weight in weights.values.items()
        }

    @staticmethod
    def min_trace_sum(shapes: Sequence[np.ndarray]) -> Ellipsoid:
        matrices = GeometricSumService._stack(shapes)
        members = GeometricSumService.retained(matrices)
        n = matrices[0].shape[0]
        if not members:
            logger.debug("All members of the geometric sum are degenerate")
            return Ellipsoid.zero(n)

        roots = [np.sqrt(float(np.trace(matrix))) for matrix in members]
        normalized = sum(matrix / root for matrix, root in zip(members, roots))
        return Ellipsoid(symmetrize(sum(roots) * normalized))

    @staticmethod
    def directional_sum(shapes: Sequence[np.ndarray], ell) -> Ellipsoid:
        ell = as_direction(ell)
        matrices = GeometricSumService._stack(shapes)
        n = matrices[0].shape[0]
        members = GeometricSumService.retained(matrices)
        if not members:
            return Ellipsoid.zero(n)

        threshold = TRACE_EPS * max(float(np.trace(matrix)) for matrix in members)
        supports, kept = [], []
        for matrix in members:
            quadratic = float(ell @ matrix @ ell)
            if quadratic > threshold:
                supports.append(np.sqrt(quadratic))
                kept.append(matrix)
        if not kept:
            return Ellipsoid.zero(n)

        normalized = sum(matrix / support for matrix, support in zip(kept, supports))
        return Ellipsoid(symmetrize(sum(supports) * normalized))


def direction_grid(n: int, count: int, seed: int = 0) -> np.ndarray:
    """
    Unit directions, one per row.

    In 2D the grid is uniform in angle starting at angle 0. For n >= 3 the
    directions come from a scrambled Halton sequence pushed through the normal
    quantile function, so the same seed always gives the same grid.
    """
    if n == 1:
        return np.array([[1.0], [-1.0]])
    if n == 2:
        angles = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(angles), np.sin(angles)])

    sampler = qmc.Halton(d=n, scramble=True, seed=seed)
    uniform = np.clip(sampler.random(count), 1e-12, 1 - 1e-12)
    gaussian = norm.ppf(uniform)
    return gaussian / np.linalg.norm(gaussian, axis=1, keepdims=True)
