"""
Security/performance co-design: minimize the attack objective J(L, K) subject
to the OCC gain equality gamma(L, K) = gamma_bar, via the stationarity
conditions of Omega = J + lambda * Con with

    Con = tr(C P_x C^T) + tr R2 - gamma_bar^2 (tr R1 + tr R2).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from django.conf import settings
from scipy.linalg import null_space

from .ellipsoid import TRACE_EPS
from .exceptions import ConvergenceException, InfeasibleTargetException
from .lti_model import (
    DetectorConfig,
    GainPair,
    NoiseTruncation,
    PlantModel,
    matrix_to_list,
)
from .performance import (
    CURVATURE_STEP_FACTOR,
    SelectorMatrices,
    SolverConfig,
    central_difference_jacobian,
    covariance_partials,
    hessian_rejects,
    min_occ_gain,
    occ_gain,
    occ_residuals,
    open_loop_gain,
    second_difference,
    solve_stationary_point,
    stacked_matrices,
    truncated_sum,
)
from .reachability import gain_attack_objective, summarize_reachability

logger = logging.getLogger(__name__)

RANK_TOLERANCE = settings.CODESIGN['RANK_TOLERANCE']
# relative slack above the open-loop gain that is still treated as the open loop
OPEN_LOOP_SLACK = 1e-2
LOWER_END_SLACK = 1e-3


@dataclass
class DesignProblem:
    model: PlantModel
    detector: DetectorConfig
    truncation: NoiseTruncation
    gamma_bar: float
    k_star: int
    solver: SolverConfig
    gamma_star: Optional[float] = None
    reference_gains: Optional[GainPair] = None
    gamma_open_loop: Optional[float] = None
    warnings: List[str] = field(default_factory=list)

    def to_payload(self) -> Dict[str, Any]:
        return {
            'model': self.model.to_payload(),
            'gamma_bar': self.gamma_bar,
            'k_star': self.k_star,
            'solver': self.solver.to_payload(),
        }


@dataclass
class TradeoffPoint:
    gamma_bar: float
    gains: Optional[GainPair]
    multiplier: Optional[float]
    sqrt_trace_qstar: Optional[float]
    attack_objective: Optional[float]
    residual_norm: Optional[float]
    gamma: Optional[float] = None
    status: str = 'completed'
    error: Optional[str] = None
    warnings: List[str] = field(default_factory=list)

    def to_payload(self) -> Dict[str, Any]:
        return {
            'gamma_bar': self.gamma_bar,
            'gamma': self.gamma,
            'lambda': self.multiplier,
            'sqrt_trace_qstar': self.sqrt_trace_qstar,
            'attack_objective': self.attack_objective,
            'residual': self.residual_norm,
            'gains': self.gains.to_payload() if self.gains is not None else None,
            'status': self.status,
            'error': self.error,
        }


def design_objective(problem: DesignProblem, gains: GainPair) -> Tuple[float, float]:
    """J and Con on the truncated expansion used by ``stationarity_residuals``."""
    model, n = problem.model, problem.model.n
    A, R = stacked_matrices(model, gains)
    stack = truncated_sum(A, R, problem.k_star)
    sigma = model.C @ stack[n:, n:] @ model.C.T + model.R2
    objective = gain_attack_objective(model, gains, problem.k_star, sigma=sigma)
    constraint = (
        float(np.trace(model.C @ stack[:n, :n] @ model.C.T)) + float(np.trace(model.R2))
        - problem.gamma_bar ** 2 * model.noise_trace
    )
    return objective, constraint


def _gradients(problem: DesignProblem, gains: GainPair) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Gradients of J and Con in gain-vector order, with J and Con themselves."""
    model, k = problem.model, problem.k_star
    n, m = model.n, model.m
    F, G, C, L, K = model.F, model.G, model.C, gains.L, gains.K

    A, R = stacked_matrices(model, gains)
    stack = truncated_sum(A, R, k)
    partials = covariance_partials(model, gains, k).stacked()
    constraint_gradient = np.einsum('ij,pjk,ik->p', C, partials[:, :n, :n], C)
    constraint = (
        float(np.trace(C @ stack[:n, :n] @ C.T)) + float(np.trace(model.R2))
        - problem.gamma_bar ** 2 * model.noise_trace
    )

    sigma = C @ stack[n:, n:] @ C.T + model.R2
    attack_shape = L @ sigma @ L.T
    closed_loop = F + G @ K

    h_list = []
    power_f, power_cl = np.eye(n), np.eye(n)
    for _ in range(k + 1):
        h_list.append(power_cl - power_f)
        power_f = F @ power_f
        power_cl = closed_loop @ power_cl
    traces = [float(np.trace(h @ attack_shape @ h.T)) for h in h_list]
    threshold = TRACE_EPS * max(max(traces), 1e-300)

    split = n * model.p
    steps = np.stack([G @ SelectorMatrices.single_entry(m, n, u, v) for u in range(m) for v in range(n)])
    D = np.zeros_like(steps)
    weight = np.zeros((n, n))
    k_gradient = np.zeros(m * n)
    objective = 0.0
    power_cl = np.eye(n)
    for q in range(k + 1):
        h, trace = h_list[q], traces[q]
        if q >= 1 and trace > threshold:
            root_trace = math.sqrt(trace)
            objective += root_trace
            weight += h.T @ h / (2 * root_trace)
            k_gradient += np.einsum('ij,pji->p', attack_shape @ h.T, D) / root_trace
        D = closed_loop @ D + steps @ power_cl
        power_cl = closed_loop @ power_cl

    # J depends on L directly and through Sigma = C P_e C^T + R2
    sigma_partials = np.einsum('ab,pbc,dc->pad', C, partials[:split, n:, n:], C)
    l_gradient = (2 * weight @ L @ sigma).ravel() + np.einsum(
        'ab,pba->p', L.T @ weight @ L, sigma_partials
    )

    objective_gradient = np.concatenate([l_gradient, k_gradient])
    return objective_gradient, constraint_gradient, objective, constraint


def stationarity_residuals(problem: DesignProblem, gains: GainPair, multiplier: float) -> np.ndarray:
    """dOmega/dL entries, dOmega/dK entries, then the constraint value."""
    objective_gradient, constraint_gradient, _, constraint = _gradients(problem, gains)
    return np.concatenate([objective_gradient + multiplier * constraint_gradient, [constraint]])


def residual_scales(problem: DesignProblem, objective: float, multiplier: float) -> np.ndarray:
    noise = problem.model.noise_trace
    size = problem.model.n * problem.model.p + problem.model.m * problem.model.n
    gradient_scale = max(objective + abs(multiplier) * noise, noise)
    return np.concatenate([np.full(size, gradient_scale), [problem.gamma_bar ** 2 * noise]])


def initial_multiplier(problem: DesignProblem, gains: GainPair) -> float:
    objective_gradient, constraint_gradient, _, _ = _gradients(problem, gains)
    constraint_norm = np.linalg.norm(constraint_gradient)
    if constraint_norm == 0:
        return 1.0
    sign = -1.0 if objective_gradient @ constraint_gradient > 0 else 1.0
    magnitude = np.linalg.norm(objective_gradient) / constraint_norm
    return sign * (magnitude if magnitude > 0 else 1.0)


def _path_gamma(model: PlantModel, gains: GainPair) -> float:
    if not gains.is_stable(model):
        return math.inf
    return occ_gain(model, gains).gamma


def bisect_path(model: PlantModel, reference: GainPair, gamma_bar: float, scale_l: bool, scale_k: bool) -> GainPair:
    """Scale L and/or K of ``reference`` from 0 to 1 until the OCC gain equals ``gamma_bar``."""
    def scaled(s):
        return GainPair(reference.L * (s if scale_l else 1.0), reference.K * (s if scale_k else 1.0))

    high, low = 0.0, 1.0
    for _ in range(60):
        middle = (high + low) / 2
        if _path_gamma(model, scaled(middle)) > gamma_bar:
            high = middle
        else:
            low = middle
    return scaled(low)


def design_starts(problem: DesignProblem, warm_start: Optional[GainPair] = None) -> List[GainPair]:
    """Bisection starts along three scaling paths, the warm start, then random perturbations."""
    model = problem.model
    reference = problem.reference_gains
    paths = [
        bisect_path(model, reference, problem.gamma_bar, scale_l=True, scale_k=True),
        bisect_path(model, reference, problem.gamma_bar, scale_l=True, scale_k=False),
        bisect_path(model, reference, problem.gamma_bar, scale_l=False, scale_k=True),
    ]
    starts = list(paths)
    if warm_start is not None:
        starts.append(warm_start)

    for index in range(problem.solver.starts):
        rng = np.random.default_rng([problem.solver.seed, 1000 + index])
        base = paths[index % len(paths)]
        spread = float(rng.uniform(0.01, 0.3)) * max(1.0, float(np.linalg.norm(base.as_vector())))
        for _ in range(25):
            vector = base.as_vector() + spread * rng.standard_normal(base.as_vector().size)
            candidate = GainPair.from_vector(vector, model)
            if candidate.is_stable(model):
                starts.append(candidate)
                break
            spread /= 2
    return starts


def solve_design_start(problem: DesignProblem, start: GainPair, index: int) -> Dict[str, Any]:
    """One multi-start instance of the constrained design, as a JSON-ready record."""
    model, solver = problem.model, problem.solver
    size = start.as_vector().size
    multiplier = initial_multiplier(problem, start)
    objective, _ = design_objective(problem, start)
    scales = residual_scales(problem, objective, multiplier)

    def residual(vector):
        gains = GainPair.from_vector(vector[:size], model)
        return stationarity_residuals(problem, gains, vector[size]) / scales

    vector, status = solve_stationary_point(
        residual, np.concatenate([start.as_vector(), [multiplier]]), solver.max_iterations
    )

    record = {'index': index, 'accepted': False, 'residual': math.inf, 'status': status}
    if not np.all(np.isfinite(vector)):
        return record

    gains = GainPair.from_vector(vector[:size], model)
    multiplier = float(vector[size])
    if not gains.is_stable(model):
        record['reason'] = 'unstable'
        return record

    objective, _ = design_objective(problem, gains)
    raw = stationarity_residuals(problem, gains, multiplier)
    scaled = np.abs(raw) / residual_scales(problem, objective, multiplier)
    record['residual'] = float(np.max(scaled))
    if not record['residual'] <= solver.residual_tol:
        logger.debug(f"Design start {index} did not converge (residual {record['residual']:.3e})")
        return record

    def lagrangian_gradient(theta):
        return stationarity_residuals(problem, GainPair.from_vector(theta, model), multiplier)[:size]

    def lagrangian(theta):
        value, constraint = design_objective(problem, GainPair.from_vector(theta, model))
        return value + multiplier * constraint

    hessian = central_difference_jacobian(lagrangian_gradient, vector[:size], solver.hessian_step)
    _, constraint_gradient, _, _ = _gradients(problem, gains)
    tangent = null_space(constraint_gradient[np.newaxis, :])
    step = CURVATURE_STEP_FACTOR * solver.hessian_step
    rejected, smallest = hessian_rejects(
        tangent.T @ hessian @ tangent, solver.hessian_tol,
        curvature=lambda direction: second_difference(lagrangian, vector[:size], tangent @ direction, step),
    )
    if rejected:
        logger.info(f"Design start {index} rejected: projected Hessian eigenvalue {smallest:.3e}")
        record['reason'] = 'saddle'
        return record

    record.update({
        'accepted': True,
        'gains': gains.to_payload(),
        'multiplier': multiplier,
        'objective': gain_attack_objective(model, gains, problem.k_star),
        'gamma': occ_gain(model, gains).gamma,
        'raw_residual': float(np.max(np.abs(raw))),
    })
    return record


def _finish(problem: DesignProblem, gains: GainPair, multiplier, residual, gamma, status='completed', error=None):
    summary = summarize_reachability(problem.model, gains, problem.detector, problem.truncation, problem.k_star)
    return TradeoffPoint(
        gamma_bar=problem.gamma_bar,
        gains=gains,
        multiplier=multiplier,
        sqrt_trace_qstar=summary.sqrt_trace_total,
        attack_objective=summary.attack_objective,
        residual_norm=residual,
        gamma=gamma,
        status=status,
        error=error,
        warnings=list(problem.warnings),
    )


def _warn(problem: DesignProblem, message: str) -> None:
    logger.warning(message)
    problem.warnings.append(message)


def resolve_interval(problem: DesignProblem) -> None:
    """Fill in gamma_0 and gamma* (with its gains) when the caller has not."""
    if problem.gamma_open_loop is None:
        problem.gamma_open_loop = open_loop_gain(problem.model)
    if problem.gamma_star is None or problem.reference_gains is None:
        result = min_occ_gain(problem.model, problem.solver, problem.k_star)
        problem.gamma_star = result.gamma_star
        problem.reference_gains = result.gains
        problem.warnings.extend(result.warnings)


def design_gains(problem: DesignProblem, warm_start: Optional[GainPair] = None) -> TradeoffPoint:
    from .tasks import collect, design_start

    if problem.gamma_open_loop is None:
        problem.gamma_open_loop = open_loop_gain(problem.model)
    gamma_open_loop = problem.gamma_open_loop

    if problem.gamma_bar > gamma_open_loop * (1 + OPEN_LOOP_SLACK):
        logger.error(f"Target {problem.gamma_bar} is above the open-loop gain {gamma_open_loop:.6f}")
        raise InfeasibleTargetException(
            f"Target {problem.gamma_bar} lies outside the trade-off interval "
            f"[{problem.gamma_star}, {gamma_open_loop:.6f}]",
            gamma_star=problem.gamma_star,
            gamma_open_loop=gamma_open_loop,
        )
    if problem.gamma_bar >= gamma_open_loop:
        if problem.gamma_bar > gamma_open_loop:
            _warn(problem, f"Target {problem.gamma_bar} clamped to the open-loop gain {gamma_open_loop:.6f}")
        return _finish(problem, GainPair.zero(problem.model), 0.0, 0.0, gamma_open_loop)

    resolve_interval(problem)
    if problem.gamma_bar < problem.gamma_star - LOWER_END_SLACK:
        logger.error(f"Target {problem.gamma_bar} is below the minimum gain {problem.gamma_star:.6f}")
        raise InfeasibleTargetException(
            f"Target {problem.gamma_bar} lies outside the trade-off interval "
            f"[{problem.gamma_star:.6f}, {gamma_open_loop:.6f}]",
            gamma_star=problem.gamma_star,
            gamma_open_loop=gamma_open_loop,
        )
    if problem.gamma_bar <= problem.gamma_star:
        _warn(problem, f"Target {problem.gamma_bar} is at the minimum gain; returning the minimum-gain pair")
        # no multiplier exists here; the residual is that of the minimum-gain conditions
        reference = problem.reference_gains
        residual = float(np.max(np.abs(occ_residuals(problem.model, reference.as_vector(), problem.k_star))))
        return _finish(
            problem, reference, None, residual, problem.gamma_star, status='minimum_gain'
        )

    starts = design_starts(problem, warm_start)
    payload = problem.to_payload()
    results = collect(
        design_start.s(payload, start.to_payload(), index) for index, start in enumerate(starts)
    )
    for result in results:
        if result['status'] != 'completed':
            _warn(problem, f"Design start {result.get('index')} failed: {result.get('error')}")
    records = [result['record'] for result in results if result['status'] == 'completed']
    accepted = [record for record in records if record['accepted']]

    if not accepted:
        best = min((record['residual'] for record in records), default=math.inf)
        logger.error(f"No design start converged for target {problem.gamma_bar} (best residual {best:.3e})")
        raise ConvergenceException(
            f"No design start converged for target {problem.gamma_bar} (best residual {best:.3e})",
            best_residual=best,
        )

    winner = min(
        accepted,
        key=lambda record: (
            record['objective'],
            GainPair.from_payload(record['gains']).as_vector().tobytes(),
        ),
    )
    logger.info(
        f"Design at target {problem.gamma_bar}: objective {winner['objective']:.6f} "
        f"from start {winner['index']} ({len(accepted)}/{len(starts)} accepted)"
    )
    return _finish(
        problem,
        GainPair.from_payload(winner['gains']),
        winner['multiplier'],
        winner['residual'],
        winner['gamma'],
    )


def sweep_grid(gamma_lo: float, gamma_hi: float, steps: int) -> List[float]:
    """Geometric spacing in the lowest quarter of the interval, linear above it."""
    if steps == 1:
        return [gamma_lo]
    if steps == 2:
        return [gamma_lo, gamma_hi]
    knee = gamma_lo + (gamma_hi - gamma_lo) / 4
    near = steps // 2
    offsets = np.geomspace((knee - gamma_lo) * 1e-2, knee - gamma_lo, near - 1) if near > 1 else []
    grid = [gamma_lo] + [gamma_lo + offset for offset in offsets]
    grid += list(np.linspace(knee, gamma_hi, steps - near + 1)[1:])
    return [float(value) for value in grid]


def tradeoff_sweep(
    model: PlantModel,
    detector: DetectorConfig,
    truncation: NoiseTruncation,
    gamma_lo: float,
    gamma_hi: float,
    steps: int,
    solver: SolverConfig,
    k_star: int,
    warm: bool = True,
) -> List[TradeoffPoint]:
    """
    ``design_gains`` over ``sweep_grid``; with ``warm`` each point also starts
    from its predecessor's gains. Failed points are recorded and the sweep goes on.
    """
    base = DesignProblem(model, detector, truncation, gamma_hi, k_star, solver)
    resolve_interval(base)
    if gamma_lo < base.gamma_star - LOWER_END_SLACK or gamma_hi > base.gamma_open_loop * (1 + OPEN_LOOP_SLACK):
        raise InfeasibleTargetException(
            f"Sweep [{gamma_lo}, {gamma_hi}] leaves the trade-off interval "
            f"[{base.gamma_star:.6f}, {base.gamma_open_loop:.6f}]",
            gamma_star=base.gamma_star,
            gamma_open_loop=base.gamma_open_loop,
        )

    points = []
    warm_start = None
    # the first point also carries what came up while resolving the interval
    pending = list(base.warnings)
    for gamma_bar in sweep_grid(gamma_lo, gamma_hi, steps):
        problem = DesignProblem(
            model, detector, truncation, gamma_bar, k_star, solver,
            gamma_star=base.gamma_star,
            reference_gains=base.reference_gains,
            gamma_open_loop=base.gamma_open_loop,
            warnings=pending,
        )
        pending = []
        try:
            point = design_gains(problem, warm_start if warm else None)
            warm_start = point.gains
        except (ConvergenceException, InfeasibleTargetException) as e:
            _warn(problem, f"Sweep point {gamma_bar:.6f} failed: {e}")
            point = TradeoffPoint(
                gamma_bar=gamma_bar, gains=None, multiplier=None, sqrt_trace_qstar=None,
                attack_objective=None, residual_norm=getattr(e, 'best_residual', None),
                status='failed', error=str(e), warnings=list(problem.warnings),
            )
        points.append(point)
        logger.info(f"Sweep point {gamma_bar:.6f}: {point.status}")
    return points


@dataclass
class TrivialPair:
    source: str
    gains: GainPair
    max_product: float
    eigenvalue: Optional[float] = None

    def to_payload(self) -> Dict[str, Any]:
        return {
            'source': self.source,
            'eigenvalue': self.eigenvalue,
            'L': matrix_to_list(self.gains.L),
            'K': matrix_to_list(self.gains.K),
            'max_product': self.max_product,
        }


@dataclass
class TrivialDiagnostic:
    g_rank: int
    full_column_rank: bool
    every_k_trivial: bool
    pairs: List[TrivialPair] = field(default_factory=list)

    generic = 'L = 0 or K = 0'

    def to_payload(self) -> Dict[str, Any]:
        return {
            'generic': self.generic,
            'g_rank': self.g_rank,
            'gk_zero_forces_k_zero': self.full_column_rank,
            'every_k_trivial': self.every_k_trivial,
            'system_specific_pairs': [pair.to_payload() for pair in self.pairs],
        }


def attack_products(model: PlantModel, gains: GainPair) -> float:
    """max over i < n of |G K F^i L|."""
    product = model.G @ gains.K
    power = np.eye(model.n)
    largest = 0.0
    for _ in range(model.n):
        largest = max(largest, float(np.linalg.norm(product @ power @ gains.L)))
        power = model.F @ power
    return largest


def _real_invariant_subspaces(F: np.ndarray) -> List[Tuple[Optional[float], np.ndarray]]:
    eigenvalues, eigenvectors = np.linalg.eig(F)
    subspaces, seen = [], []
    for value, vector in zip(eigenvalues, eigenvectors.T):
        if abs(value.imag) <= RANK_TOLERANCE * max(1.0, abs(value)):
            subspaces.append((float(value.real), np.real(vector)[:, np.newaxis]))
        elif value.imag > 0 and not any(abs(value - other) < RANK_TOLERANCE for other in seen):
            seen.append(value)
            basis = np.linalg.qr(np.column_stack([vector.real, vector.imag]))[0]
            subspaces.append((None, basis))
    return subspaces


def trivial_solution_check(model: PlantModel) -> TrivialDiagnostic:
    n, m, p = model.n, model.m, model.p
    scale = max(float(np.linalg.norm(model.G, 2)), 1.0)
    g_rank = int(np.linalg.matrix_rank(model.G, tol=RANK_TOLERANCE * scale))
    pairs = []
    first_output = SelectorMatrices.single_entry(1, p, 0, 0)
    first_input = SelectorMatrices.single_entry(m, 1, 0, 0)

    for eigenvalue, basis in _real_invariant_subspaces(model.F):
        if basis.shape[1] >= n:
            continue
        annihilator = null_space(basis.T)
        gains = GainPair(
            basis[:, :1] @ first_output,
            first_input @ annihilator[:, :1].T,
        )
        pairs.append(TrivialPair('invariant_subspace', gains, attack_products(model, gains), eigenvalue))

    if g_rank < m:
        kernel = null_space(model.G, rcond=RANK_TOLERANCE)
        gains = GainPair(
            SelectorMatrices.single_entry(n, p, 0, 0),
            kernel[:, :1] @ SelectorMatrices.single_entry(1, n, 0, 0),
        )
        pairs.append(TrivialPair('input_null_space', gains, attack_products(model, gains)))

    diagnostic = TrivialDiagnostic(
        g_rank=g_rank,
        full_column_rank=g_rank == m,
        every_k_trivial=g_rank == 0,
        pairs=pairs,
    )
    logger.info(
        f"Trivial-solution check: rank(G) = {g_rank}, {len(pairs)} system-specific pairs"
    )
    return diagnostic
