"""
Plant, noise and detector bookkeeping for the estimator/controller loop

    x+ = F x + G u + nu,      y = C x + eta,
    xhat+ = F xhat + G u + L (y - C xhat),      u = K xhat,

with a chi-squared detector on the residual r = y - C xhat.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from django.conf import settings
from scipy.stats import chi2

from .exceptions import (
    DimensionMismatchException,
    InvalidConfigException,
    NotPositiveSemidefiniteException,
    UnboundedQuantileException,
    UnstableSystemException,
)

logger = logging.getLogger(__name__)

CLAMP_TOLERANCE = settings.CODESIGN['COVARIANCE_CLAMP_TOLERANCE']
COVARIANCE_FLOOR = settings.CODESIGN['COVARIANCE_FLOOR']
RANK_TOLERANCE = settings.CODESIGN['RANK_TOLERANCE']


def _matrix(value, name: str) -> np.ndarray:
    array = np.atleast_2d(np.asarray(value, dtype=float))
    if array.ndim != 2:
        raise DimensionMismatchException(f"{name} must be a matrix, got shape {array.shape}")
    array = array.copy()
    array.setflags(write=False)
    return array


def spectral_radius(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(matrix))))


def matrix_to_list(matrix: np.ndarray) -> List[List[float]]:
    return np.asarray(matrix, dtype=float).tolist()


@dataclass(frozen=True)
class PlantModel:
    F: np.ndarray
    G: np.ndarray
    C: np.ndarray
    R1: np.ndarray
    R2: np.ndarray

    def __post_init__(self):
        for name in ('F', 'G', 'C', 'R1', 'R2'):
            object.__setattr__(self, name, _matrix(getattr(self, name), name))

        n = self.F.shape[0]
        expected = {
            'F': (n, n),
            'G': (n, self.G.shape[1]),
            'C': (self.C.shape[0], n),
            'R1': (n, n),
            'R2': (self.C.shape[0], self.C.shape[0]),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatchException(
                    f"{name} is {getattr(self, name).shape}, expected {shape}"
                )

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    @property
    def noise_trace(self) -> float:
        """tr R1 + tr R2, the denominator of the output covariance gain."""
        return float(np.trace(self.R1) + np.trace(self.R2))

    def replace(self, **changes) -> 'PlantModel':
        values = {name: getattr(self, name) for name in ('F', 'G', 'C', 'R1', 'R2')}
        values.update(changes)
        return PlantModel(**values)

    def to_payload(self) -> Dict[str, Any]:
        return {
            'n': self.n, 'm': self.m, 'p': self.p,
            'F': matrix_to_list(self.F), 'G': matrix_to_list(self.G),
            'C': matrix_to_list(self.C), 'R1': matrix_to_list(self.R1),
            'R2': matrix_to_list(self.R2),
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> 'PlantModel':
        return cls(*(payload[name] for name in ('F', 'G', 'C', 'R1', 'R2')))


@dataclass(frozen=True)
class GainPair:
    L: np.ndarray
    K: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'L', _matrix(self.L, 'L'))
        object.__setattr__(self, 'K', _matrix(self.K, 'K'))

    @classmethod
    def zero(cls, model: PlantModel) -> 'GainPair':
        return cls(np.zeros((model.n, model.p)), np.zeros((model.m, model.n)))

    @classmethod
    def from_vector(cls, vector: np.ndarray, model: PlantModel) -> 'GainPair':
        """Inverse of ``as_vector``: L entries row-major, then K entries row-major."""
        split = model.n * model.p
        vector = np.asarray(vector, dtype=float)
        return cls(
            vector[:split].reshape(model.n, model.p),
            vector[split:split + model.m * model.n].reshape(model.m, model.n),
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.L.ravel(), self.K.ravel()])

    def check_dimensions(self, model: PlantModel) -> None:
        if self.L.shape != (model.n, model.p):
            raise DimensionMismatchException(f"L is {self.L.shape}, expected {(model.n, model.p)}")
        if self.K.shape != (model.m, model.n):
            raise DimensionMismatchException(f"K is {self.K.shape}, expected {(model.m, model.n)}")

    def radii(self, model: PlantModel) -> Tuple[float, float]:
        """Spectral radii of the estimator F - LC and the regulator F + GK."""
        return (
            spectral_radius(model.F - self.L @ model.C),
            spectral_radius(model.F + model.G @ self.K),
        )

    def is_stable(self, model: PlantModel) -> bool:
        return max(self.radii(model)) < 1.0

    def to_payload(self) -> Dict[str, Any]:
        return {'L': matrix_to_list(self.L), 'K': matrix_to_list(self.K)}

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> 'GainPair':
        return cls(payload['L'], payload['K'])


def chi2_quantile(dof: int, prob: float) -> float:
    """The threshold m with Pr(chi2_dof <= m) = prob."""
    if dof < 1:
        raise InvalidConfigException(f"Degrees of freedom must be positive, got {dof}")
    if not 0.0 <= prob <= 1.0:
        raise InvalidConfigException(f"Probability must lie in [0, 1], got {prob}")
    if prob == 1.0:
        raise UnboundedQuantileException("The chi-squared quantile at probability one is unbounded")
    if prob == 0.0:
        return 0.0
    return float(chi2.ppf(prob, dof))


@dataclass(frozen=True)
class DetectorConfig:
    false_alarm_rate: float
    p: int
    alpha: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.false_alarm_rate < 1.0:
            raise InvalidConfigException(
                f"False alarm rate must lie in (0, 1), got {self.false_alarm_rate}"
            )
        if self.alpha is None:
            object.__setattr__(self, 'alpha', chi2_quantile(self.p, 1.0 - self.false_alarm_rate))
        elif self.alpha <= 0:
            raise InvalidConfigException(f"Detector threshold must be positive, got {self.alpha}")


@dataclass(frozen=True)
class NoiseTruncation:
    p_bar: float
    n: int
    p: int
    nu_bar: float = field(init=False)
    # Sensor noise is cancelled by the zero-alarm attack; only the full-loop
    # simulation draws from this bound.
    eta_bar: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'nu_bar', chi2_quantile(self.n, self.p_bar))
        object.__setattr__(self, 'eta_bar', chi2_quantile(self.p, self.p_bar))


@dataclass(frozen=True)
class ClosedLoopRealization:
    A: np.ndarray
    B: np.ndarray
    R: np.ndarray
    P_e: np.ndarray
    Sigma: np.ndarray
    Sigma_sqrt: np.ndarray

    @property
    def spectral_radius(self) -> float:
        return spectral_radius(self.A)


@dataclass
class ModelDiagnostics:
    model: PlantModel
    spectral_radius: float
    stable: bool
    detectable: bool
    stabilizable: bool
    observability_rank: int
    controllability_rank: int
    adjustments: Dict[str, Dict[str, float]] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.stable and self.detectable and self.stabilizable

    def to_payload(self) -> Dict[str, Any]:
        return {
            'passed': self.passed,
            'stable': self.stable,
            'detectable': self.detectable,
            'stabilizable': self.stabilizable,
            'spectral_radius': self.spectral_radius,
            'observability_rank': self.observability_rank,
            'controllability_rank': self.controllability_rank,
            'adjustments': self.adjustments,
        }


def clamp_covariance(matrix: np.ndarray, name: str) -> Tuple[np.ndarray, Optional[Dict[str, float]]]:
    """
    Raise slightly negative eigenvalues (printed rounding) to a small positive floor.

    Eigenvalues below -CLAMP_TOLERANCE * trace are rejected.
    """
    symmetric = (matrix + matrix.T) / 2
    trace = float(np.trace(symmetric))
    eigenvalues, eigenvectors = np.linalg.eigh(symmetric)
    smallest = float(eigenvalues.min())

    if smallest < -CLAMP_TOLERANCE * abs(trace):
        logger.error(f"{name} has eigenvalue {smallest:.3e}, trace {trace:.3e}")
        raise NotPositiveSemidefiniteException(
            f"{name} is not positive semidefinite: eigenvalue {smallest:.3e} with trace {trace:.3e}"
        )
    if smallest >= 0:
        return symmetric, None

    floor = COVARIANCE_FLOOR * trace
    clamped = eigenvectors @ np.diag(np.where(eigenvalues < 0, floor, eigenvalues)) @ eigenvectors.T
    return (clamped + clamped.T) / 2, {'min_eigenvalue': smallest, 'floor': floor}


def _pbh_ranks(F: np.ndarray, other: np.ndarray, stack_rows: bool) -> Tuple[int, int]:
    """
    Smallest PBH rank over all eigenvalues of F and over the unstable ones.

    ``stack_rows`` tests [lambda I - F; C] (detectability), otherwise
    [lambda I - F, G] (stabilizability).
    """
    n = F.shape[0]
    lowest, lowest_unstable = n, n
    for eigenvalue in np.linalg.eigvals(F):
        shifted = eigenvalue * np.eye(n) - F
        test = np.vstack([shifted, other]) if stack_rows else np.hstack([shifted, other])
        scale = max(np.linalg.norm(test, 2), 1.0)
        rank = int(np.linalg.matrix_rank(test, tol=RANK_TOLERANCE * scale))
        lowest = min(lowest, rank)
        if abs(eigenvalue) >= 1.0:
            lowest_unstable = min(lowest_unstable, rank)
    return lowest, lowest_unstable


def validate_model(model: PlantModel) -> ModelDiagnostics:
    adjustments, warnings = {}, []
    clamped = {}
    for name in ('R1', 'R2'):
        matrix, adjustment = clamp_covariance(getattr(model, name), name)
        clamped[name] = matrix
        if adjustment:
            adjustments[name] = adjustment
            message = (
                f"{name} had eigenvalue {adjustment['min_eigenvalue']:.3e}; "
                f"clamped to {adjustment['floor']:.3e}"
            )
            logger.warning(message)
            warnings.append(message)

    radius = spectral_radius(model.F)
    observability, detectability = _pbh_ranks(model.F, model.C, stack_rows=True)
    controllability, stabilizability = _pbh_ranks(model.F, model.G, stack_rows=False)

    diagnostics = ModelDiagnostics(
        model=model.replace(**clamped),
        spectral_radius=radius,
        stable=radius < 1.0,
        detectable=detectability == model.n,
        stabilizable=stabilizability == model.n,
        observability_rank=observability,
        controllability_rank=controllability,
        adjustments=adjustments,
        warnings=warnings,
    )
    if not diagnostics.passed:
        message = (
            f"Model check failed: stable={diagnostics.stable} "
            f"detectable={diagnostics.detectable} stabilizable={diagnostics.stabilizable}"
        )
        logger.warning(message)
        diagnostics.warnings.append(message)
    return diagnostics


def require_stable(matrix: np.ndarray, name: str) -> float:
    radius = spectral_radius(matrix)
    if radius >= 1.0:
        logger.error(f"{name} is not Schur stable (spectral radius {radius:.6f})")
        raise UnstableSystemException(
            f"{name} is not Schur stable (spectral radius {radius:.6f})",
            spectral_radius=radius,
        )
    return radius


def solve_stein(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve X = A X A^T + Q through the Kronecker form (I - A (x) A) vec(X) = vec(Q)."""
    a = np.asarray(a, dtype=float)
    q = np.asarray(q, dtype=float)
    lhs = np.eye(a.size) - np.kron(a, a)
    solution = np.linalg.solve(lhs, q.reshape(-1)).reshape(q.shape)
    return (solution + solution.T) / 2


def estimation_error_covariance(model: PlantModel, L: np.ndarray) -> np.ndarray:
    error_dynamics = model.F - L @ model.C
    require_stable(error_dynamics, 'F - LC')
    return solve_stein(error_dynamics, L @ model.R2 @ L.T + model.R1)


def symmetric_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, eigenvectors = np.linalg.eigh((matrix + matrix.T) / 2)
    root = eigenvectors @ np.diag(np.sqrt(np.clip(eigenvalues, 0.0, None))) @ eigenvectors.T
    return (root + root.T) / 2


def residual_covariance(
    model: PlantModel, L: np.ndarray, p_e: Optional[np.ndarray] = None
) -> Tuple[np.ndarray, np.ndarray]:
    if p_e is None:
        p_e = estimation_error_covariance(model, L)
    sigma = model.C @ p_e @ model.C.T + model.R2
    sigma = (sigma + sigma.T) / 2

    smallest = float(np.linalg.eigvalsh(sigma).min())
    if smallest <= 0:
        logger.error(f"Residual covariance is singular (eigenvalue {smallest:.3e})")
        raise NotPositiveSemidefiniteException(
            f"Residual covariance is not positive definite (eigenvalue {smallest:.3e})"
        )
    return sigma, symmetric_sqrt(sigma)


def assemble_closed_loop(model: PlantModel, gains: GainPair) -> ClosedLoopRealization:
    gains.check_dimensions(model)
    n, p = model.n, model.p
    F, G, C, L, K = model.F, model.G, model.C, gains.L, gains.K

    require_stable(F + G @ K, 'F + GK')
    p_e = estimation_error_covariance(model, L)
    sigma, sigma_sqrt = residual_covariance(model, L, p_e)

    A = np.block([
        [F + G @ K, -G @ K],
        [np.zeros((n, n)), F - L @ C],
    ])
    B = np.block([
        [np.eye(n), np.zeros((n, p))],
        [np.eye(n), -L],
    ])
    R = np.block([
        [model.R1, model.R1],
        [model.R1, model.R1 + L @ model.R2 @ L.T],
    ])
    return ClosedLoopRealization(A=A, B=B, R=R, P_e=p_e, Sigma=sigma, Sigma_sqrt=sigma_sqrt)


def kalman_predictor_gain(model: PlantModel, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """Steady-state one-step predictor gain L = F P C^T (C P C^T + R2)^-1 by Riccati iteration."""
    F, C = model.F, model.C
    P = model.R1.copy()
    for _ in range(max_iter):
        S = C @ P @ C.T + model.R2
        gain = F @ P @ C.T @ np.linalg.pinv(S)
        P_next = F @ P @ F.T + model.R1 - gain @ C @ P @ F.T
        P_next = (P_next + P_next.T) / 2
        if np.linalg.norm(P_next - P, ord='fro') <= tol * max(np.linalg.norm(P, ord='fro'), 1.0):
            P = P_next
            break
        P = P_next
    else:
        logger.warning("Filter Riccati iteration hit the iteration limit")
    return F @ P @ C.T @ np.linalg.pinv(C @ P @ C.T + model.R2)


def lqr_gain(model: PlantModel, tol: float = 1e-12, max_iter: int = 10_000) -> np.ndarray:
    """
    State-feedback gain u = K x from the control Riccati iteration with output
    weighting C^T C and a small input weight; cheap control drives F + GK towards
    deadbeat when G is invertible.
    """
    F, G = model.F, model.G
    Q = model.C.T @ model.C
    weight = 1e-4 * max(float(np.trace(Q)), 1.0)
    P = Q.copy()
    for _ in range(max_iter):
        gain = np.linalg.solve(weight * np.eye(model.m) + G.T @ P @ G, G.T @ P @ F)
        P_next = F.T @ P @ F + Q - F.T @ P @ G @ gain
        P_next = (P_next + P_next.T) / 2
        if np.linalg.norm(P_next - P, ord='fro') <= tol * max(np.linalg.norm(P, ord='fro'), 1.0):
            P = P_next
            break
        P = P_next
    else:
        logger.warning("Control Riccati iteration hit the iteration limit")
    return -np.linalg.solve(weight * np.eye(model.m) + G.T @ P @ G, G.T @ P @ F)
