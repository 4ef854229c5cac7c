"""
Output covariance constrained (OCC) gain of the estimator/controller loop.

With the stacked state (x, e) the loop is s+ = A s + B (nu, eta) and its
steady covariance P solves P = A P A^T + R. The OCC gain is

    gamma = sqrt((tr(C P_x C^T) + tr R2) / (tr R1 + tr R2)),

and the smallest achievable gamma is found by solving the stationarity
conditions d tr(C P_x C^T) / d(L, K) = 0 from many starts.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np
from django.conf import settings
from scipy.optimize import root

from .exceptions import CodesignException, ConvergenceException
from .lti_model import (
    GainPair,
    PlantModel,
    assemble_closed_loop,
    kalman_predictor_gain,
    lqr_gain,
    matrix_to_list,
    require_stable,
    solve_stein,
)

logger = logging.getLogger(__name__)

# the curvature re-check uses this multiple of the Hessian step
CURVATURE_STEP_FACTOR = 100


@dataclass(frozen=True)
class SolverConfig:
    starts: int
    seed: int
    residual_tol: float
    max_iterations: int
    hessian_step: float
    hessian_tol: float
    gain_tol: float

    @classmethod
    def from_settings(cls, **overrides) -> 'SolverConfig':
        values = dict(settings.CODESIGN['SOLVER'])
        values.update({key: value for key, value in overrides.items() if value is not None})
        return cls(**values)

    def to_payload(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class OccResult:
    gamma: float
    p_stack: np.ndarray
    p_x: np.ndarray

    def to_payload(self) -> Dict[str, Any]:
        return {'gamma': self.gamma, 'p_x': matrix_to_list(self.p_x)}


class SelectorMatrices:
    @staticmethod
    def single_entry(rows: int, cols: int, i: int, j: int) -> np.ndarray:
        matrix = np.zeros((rows, cols))
        matrix[i, j] = 1.0
        return matrix


@dataclass
class GradientBundle:
    dP_dL: np.ndarray  # (n, p, 2n, 2n)
    dP_dK: np.ndarray  # (m, n, 2n, 2n)
    horizon: int

    def stacked(self) -> np.ndarray:
        """All partials in gain-vector order: L row-major, then K row-major."""
        size = self.dP_dL.shape[-1]
        return np.concatenate([
            self.dP_dL.reshape(-1, size, size),
            self.dP_dK.reshape(-1, size, size),
        ])

    def constraint_gradient(self, C: np.ndarray) -> np.ndarray:
        """tr(C E_x dP E_x^T C^T) for every gain entry."""
        n = C.shape[1]
        return np.einsum('ij,pjk,ik->p', C, self.stacked()[:, :n, :n], C)


def gain_from_covariance(model: PlantModel, p_x: np.ndarray) -> float:
    output = float(np.trace(model.C @ p_x @ model.C.T)) + float(np.trace(model.R2))
    return math.sqrt(max(output, 0.0) / model.noise_trace)


def solve_steady_covariance(A: np.ndarray, R: np.ndarray) -> np.ndarray:
    require_stable(A, 'A')
    return solve_stein(A, R)


def truncated_sum(A: np.ndarray, R: np.ndarray, k: int) -> np.ndarray:
    """Sum of A^q R A^q^T for q = 0..k, with no stability requirement."""
    total = np.zeros_like(R)
    power = np.eye(A.shape[0])
    for _ in range(k + 1):
        total += power @ R @ power.T
        power = A @ power
    return (total + total.T) / 2


def truncated_covariance(A: np.ndarray, R: np.ndarray, k: int) -> Tuple[np.ndarray, float]:
    """
    ``truncated_sum`` and a bound on its distance to the steady covariance:
    P - P_k = A^(k+1) P A^(k+1)^T.
    """
    power = np.linalg.matrix_power(A, k + 1)
    tail = np.linalg.norm(power, 2) ** 2 * np.linalg.norm(solve_steady_covariance(A, R), 2)
    return truncated_sum(A, R, k), float(tail)


def occ_gain(model: PlantModel, gains: GainPair) -> OccResult:
    realization = assemble_closed_loop(model, gains)
    p_stack = solve_steady_covariance(realization.A, realization.R)
    p_x = p_stack[:model.n, :model.n]
    return OccResult(gamma=gain_from_covariance(model, p_x), p_stack=p_stack, p_x=p_x)


def open_loop_gain(model: PlantModel) -> float:
    require_stable(model.F, 'F')
    return gain_from_covariance(model, solve_stein(model.F, model.R1))


def stacked_matrices(model: PlantModel, gains: GainPair) -> Tuple[np.ndarray, np.ndarray]:
    """A and R of the stacked loop without stability checks, for solver iterates."""
    n = model.n
    F, G, C, L, K = model.F, model.G, model.C, gains.L, gains.K
    A = np.block([[F + G @ K, -G @ K], [np.zeros((n, n)), F - L @ C]])
    R = np.block([[model.R1, model.R1], [model.R1, model.R1 + L @ model.R2 @ L.T]])
    return A, R


def parameter_derivatives(model: PlantModel, gains: GainPair) -> Tuple[np.ndarray, np.ndarray]:
    """dA and dR for every gain entry, stacked in gain-vector order."""
    n, m, p = model.n, model.m, model.p
    size = 2 * n
    count = n * p + m * n
    dA = np.zeros((count, size, size))
    dR = np.zeros((count, size, size))

    index = 0
    for i in range(n):
        for j in range(p):
            J = SelectorMatrices.single_entry(n, p, i, j)
            dA[index, n:, n:] = -J @ model.C
            dR[index, n:, n:] = J @ model.R2 @ gains.L.T + gains.L @ model.R2 @ J.T
            index += 1
    for u in range(m):
        for v in range(n):
            GJ = model.G @ SelectorMatrices.single_entry(m, n, u, v)
            dA[index, :n, :n] = GJ
            dA[index, :n, n:] = -GJ
            index += 1
    return dA, dR


def _bundle(model: PlantModel, partials: np.ndarray, k: int) -> GradientBundle:
    size = 2 * model.n
    split = model.n * model.p
    return GradientBundle(
        dP_dL=partials[:split].reshape(model.n, model.p, size, size),
        dP_dK=partials[split:].reshape(model.m, model.n, size, size),
        horizon=k,
    )


def covariance_partials(model: PlantModel, gains: GainPair, k: int) -> GradientBundle:
    """
    Partial derivatives of the truncated covariance sum_{q<=k} A^q R A^q^T.

    d(A^q) is carried by T_(q+1) = A T_q + dA A^q with T_0 = 0, which is the
    double sum over r of A^r dA A^(q-1-r) evaluated one power at a time.
    """
    A, R = stacked_matrices(model, gains)
    dA, dR = parameter_derivatives(model, gains)

    partials = np.zeros_like(dA)
    T = np.zeros_like(dA)
    power = np.eye(A.shape[0])
    for _ in range(k + 1):
        S = T @ (R @ power.T)
        partials += S + S.transpose(0, 2, 1) + power @ dR @ power.T
        T = A @ T + dA @ power
        power = A @ power
    return _bundle(model, partials, k)


def covariance_partials_reference(model: PlantModel, gains: GainPair, k: int) -> GradientBundle:
    """The same partials as ``covariance_partials`` from the explicit double sum."""
    A, R = stacked_matrices(model, gains)
    dA, dR = parameter_derivatives(model, gains)
    powers = [np.eye(A.shape[0])]
    for _ in range(k):
        powers.append(A @ powers[-1])

    partials = np.zeros_like(dA)
    for index in range(dA.shape[0]):
        for q in range(k + 1):
            term = powers[q] @ dR[index] @ powers[q].T
            for r in range(q):
                inner = powers[r] @ dA[index] @ powers[q - 1 - r] @ R @ powers[q].T
                term = term + inner + inner.T
            partials[index] += term
    return _bundle(model, partials, k)


def occ_residuals(model: PlantModel, vector: np.ndarray, k: int) -> np.ndarray:
    return covariance_partials(model, GainPair.from_vector(vector, model), k).constraint_gradient(model.C)


def output_trace(model: PlantModel, vector: np.ndarray, k: int) -> float:
    """tr(C P_x C^T) on the truncated expansion; ``occ_residuals`` is its gradient."""
    A, R = stacked_matrices(model, GainPair.from_vector(vector, model))
    p_x = truncated_sum(A, R, k)[:model.n, :model.n]
    return float(np.trace(model.C @ p_x @ model.C.T))


def _largest_entry(function, vector: np.ndarray) -> float:
    if not np.all(np.isfinite(vector)):
        return math.inf
    value = float(np.max(np.abs(function(vector))))
    return value if math.isfinite(value) else math.inf


def solve_stationary_point(function, start: np.ndarray, max_iterations: int) -> Tuple[np.ndarray, int]:
    """
    Powell hybrid solve of function(x) = 0 from ``start``.

    Runs that stop early (hybr status other than 1) are polished from where
    they stopped with Levenberg-Marquardt; the polished point is kept when
    its residual is smaller.
    """
    evaluations = max_iterations * (start.size + 1)
    with np.errstate(over='ignore', invalid='ignore'):
        solution = root(function, start, method='hybr', options={'xtol': 1e-13, 'maxfev': evaluations})
        vector = solution.x
        if solution.status != 1 and np.all(np.isfinite(vector)):
            polished = root(
                function, vector, method='lm',
                options={'xtol': 1e-15, 'ftol': 1e-15, 'maxiter': evaluations},
            )
            if _largest_entry(function, polished.x) < _largest_entry(function, vector):
                logger.debug(f"hybr stopped with status {solution.status}; polished with lm")
                vector = polished.x
    return vector, int(solution.status)


def central_difference_jacobian(function, vector: np.ndarray, step: float) -> np.ndarray:
    columns = []
    for index in range(vector.size):
        offset = np.zeros_like(vector)
        offset[index] = step
        columns.append((function(vector + offset) - function(vector - offset)) / (2 * step))
    return np.column_stack(columns)


def second_difference(function, vector: np.ndarray, direction: np.ndarray, step: float) -> float:
    """Curvature of the scalar ``function`` along the unit ``direction``."""
    center = function(vector)
    return (function(vector + step * direction) + function(vector - step * direction) - 2 * center) / step ** 2


def hessian_rejects(hessian: np.ndarray, tol: float, curvature=None) -> Tuple[bool, float]:
    """
    True when the symmetric part of ``hessian`` has a clearly negative eigenvalue,
    below -tol * max(1, |H|_2).

    ``curvature(direction)`` re-measures the curvature along the offending
    eigenvector on a wider stencil; when that is not clearly negative the
    eigenvalue is taken as difference noise along a flat direction.
    """
    symmetric = (hessian + hessian.T) / 2
    if not symmetric.size:
        return False, 0.0
    eigenvalues, eigenvectors = np.linalg.eigh(symmetric)
    smallest = float(eigenvalues[0])
    threshold = -tol * max(1.0, float(np.abs(eigenvalues).max()))
    if smallest >= threshold:
        return False, smallest
    if curvature is not None:
        try:
            measured = float(curvature(eigenvectors[:, 0]))
        except CodesignException:
            return True, smallest
        if math.isfinite(measured) and measured >= threshold:
            logger.debug(f"Eigenvalue {smallest:.3e} not confirmed (curvature {measured:.3e})")
            return False, smallest
    return True, smallest


def _perturbed_stable(model: PlantModel, base: GainPair, rng: np.random.Generator, scale: float) -> GainPair:
    magnitude = max(1.0, float(np.linalg.norm(base.as_vector())))
    for _ in range(8):
        for _ in range(25):
            vector = base.as_vector() + scale * magnitude * rng.standard_normal(base.as_vector().size)
            gains = GainPair.from_vector(vector, model)
            if gains.is_stable(model):
                return gains
        scale /= 2
    return base


def riccati_seed(model: PlantModel) -> GainPair:
    return GainPair(kalman_predictor_gain(model), lqr_gain(model))


def min_gain_seed(model: PlantModel, solver: SolverConfig, index: int) -> GainPair:
    """
    Start ``index``: 0 is a small perturbation of zero, 1 the Kalman/LQR pair,
    the rest random stable perturbations of either. Deterministic in the seed.
    """
    rng = np.random.default_rng([solver.seed, index])
    if index == 0:
        return _perturbed_stable(model, GainPair.zero(model), rng, 0.01)
    seed = riccati_seed(model)
    if index == 1:
        return seed
    base = seed if index % 2 == 0 else GainPair.zero(model)
    return _perturbed_stable(model, base, rng, float(rng.uniform(0.05, 1.0)))


def solve_min_gain_start(model: PlantModel, solver: SolverConfig, k: int, index: int) -> Dict[str, Any]:
    """One multi-start instance of the minimum-gain solve, as a JSON-ready record."""
    from .reachability import gain_attack_objective

    start = min_gain_seed(model, solver, index)
    scale = model.noise_trace

    def residual(vector):
        return occ_residuals(model, vector, k)

    def objective(vector):
        return output_trace(model, vector, k)

    vector, status = solve_stationary_point(residual, start.as_vector(), solver.max_iterations)
    residual_norm = _largest_entry(residual, vector)

    record = {'index': index, 'residual': residual_norm, 'status': status, 'accepted': False}
    if not residual_norm <= solver.residual_tol * scale:
        logger.debug(f"Start {index} did not converge (status {status}, residual {residual_norm:.3e})")
        record['reason'] = 'not_converged'
        return record

    gains = GainPair.from_vector(vector, model)
    if not gains.is_stable(model):
        logger.debug(f"Start {index} converged to unstable gains")
        record['reason'] = 'unstable'
        return record

    hessian = central_difference_jacobian(residual, vector, solver.hessian_step)
    step = CURVATURE_STEP_FACTOR * solver.hessian_step
    rejected, smallest = hessian_rejects(
        hessian, solver.hessian_tol,
        curvature=lambda direction: second_difference(objective, vector, direction, step),
    )
    if rejected:
        logger.info(f"Start {index} rejected: Hessian eigenvalue {smallest:.3e}")
        record['reason'] = 'saddle'
        return record

    record.update({
        'accepted': True,
        'gains': gains.to_payload(),
        'gamma': occ_gain(model, gains).gamma,
        'objective': gain_attack_objective(model, gains, k),
    })
    return record


@dataclass
class MinGainResult:
    gamma_star: float
    gains: GainPair
    attack_objective: float
    residual: float
    accepted_starts: int
    total_starts: int
    candidates: List[Dict[str, Any]] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)

    def to_payload(self) -> Dict[str, Any]:
        return {
            'gamma_star': self.gamma_star,
            'gains': self.gains.to_payload(),
            'attack_objective': self.attack_objective,
            'residual': self.residual,
            'accepted_starts': self.accepted_starts,
            'total_starts': self.total_starts,
        }


def select_min_gain(records: List[Dict[str, Any]], gain_tol: float) -> Dict[str, Any]:
    """Smallest gamma; within ``gain_tol`` of it the smallest attack objective, then gain bytes."""
    accepted = [record for record in records if record.get('accepted')]
    best_gamma = min(record['gamma'] for record in accepted)
    near = [record for record in accepted if record['gamma'] <= best_gamma + gain_tol]
    return min(
        near,
        key=lambda record: (
            record['objective'],
            GainPair.from_payload(record['gains']).as_vector().tobytes(),
        ),
    )


def min_occ_gain(model: PlantModel, solver: SolverConfig, k: int) -> MinGainResult:
    from .tasks import collect, min_gain_start

    total = solver.starts + 2
    payload = {'model': model.to_payload(), 'solver': solver.to_payload(), 'k': k}
    results = collect(min_gain_start.s(payload, index) for index in range(total))

    warnings = []
    for result in results:
        if result['status'] != 'completed':
            message = f"Minimum-gain start {result.get('index')} failed: {result.get('error')}"
            logger.warning(message)
            warnings.append(message)
    records = [result['record'] for result in results if result['status'] == 'completed']

    if not any(record['accepted'] for record in records):
        best = min((record['residual'] for record in records), default=math.inf)
        logger.error(f"No minimum-gain start converged (best residual {best:.3e})")
        raise ConvergenceException(
            f"No minimum-gain start converged (best residual {best:.3e})", best_residual=best
        )

    winner = select_min_gain(records, solver.gain_tol)
    accepted = sum(1 for record in records if record['accepted'])
    logger.info(
        f"Minimum OCC gain {winner['gamma']:.6f} from start {winner['index']} "
        f"({accepted}/{total} starts accepted)"
    )
    return MinGainResult(
        gamma_star=winner['gamma'],
        gains=GainPair.from_payload(winner['gains']),
        attack_objective=winner['objective'],
        residual=winner['residual'],
        accepted_starts=accepted,
        total_starts=total,
        candidates=records,
        warnings=warnings,
    )
