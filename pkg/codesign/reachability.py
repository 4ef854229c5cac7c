"""
Reachable set of the state under zero-alarm sensor attacks.

A zero-alarm attack keeps the residual equal to Sigma^(1/2) delta_bar with
|delta_bar|^2 <= alpha, which splits the loop into

    e+ = F e + nu - L Sigma^(1/2) delta_bar
    x+ = (F + GK) x - GK e + nu

so that, from zero initial conditions,

    x_k = sum_j F^j nu_{k-1-j} + H_j L Sigma^(1/2) delta_bar_{k-1-j},  H_j = (F + GK)^j - F^j.

Each summand ranges over an ellipsoid and the reachable set is their geometric
sum, bounded by its minimum-trace outer ellipsoid Q*.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from django.conf import settings

from .ellipsoid import Ellipsoid, GeometricSumService, TRACE_EPS
from .exceptions import CodesignException, HorizonNotSettledException
from .lti_model import (
    DetectorConfig,
    GainPair,
    NoiseTruncation,
    PlantModel,
    matrix_to_list,
    require_stable,
    residual_covariance,
    symmetric_sqrt,
)

logger = logging.getLogger(__name__)

HORIZON_EPS = settings.CODESIGN['HORIZON_EPS']
HORIZON_CAP = settings.CODESIGN['HORIZON_CAP']
MEMBERSHIP_TOLERANCE = settings.CODESIGN['MEMBERSHIP_TOLERANCE']
SIMULATION_BATCH = settings.CODESIGN['SIMULATION_BATCH']

SIMULATION_MODES = ('boundary', 'interior', 'support', 'greedy')


@dataclass(frozen=True)
class ReachabilityTerms:
    q_nu: List[np.ndarray]
    q_delta: List[np.ndarray]
    h: List[np.ndarray]
    f_powers: List[np.ndarray]
    horizon: int
    alpha: float
    nu_bar: float
    # L Sigma L^T, the attack shape before it is propagated by H_i
    attack_shape: np.ndarray
    sigma_sqrt: np.ndarray

    def merged(self, upto: Optional[int] = None) -> List[np.ndarray]:
        """Noise and attack terms with index i <= ``upto`` (all of them by default)."""
        stop = self.horizon + 1 if upto is None else upto + 1
        return self.q_nu[:stop] + self.q_delta[:stop]


class _RunningBound:
    """Accumulates the minimum-trace bound one term at a time."""

    def __init__(self, n: int):
        self.root_sum = 0.0
        self.normalized = np.zeros((n, n))
        self.largest = 0.0

    def add(self, term: np.ndarray) -> None:
        trace = float(np.trace(term))
        self.largest = max(self.largest, trace)
        if trace <= 0 or trace < TRACE_EPS * self.largest:
            return
        root = math.sqrt(trace)
        self.root_sum += root
        self.normalized += term / root

    @property
    def shape(self) -> np.ndarray:
        value = self.root_sum * self.normalized
        return (value + value.T) / 2


def _attack_shape(model: PlantModel, gains: GainPair, sigma: Optional[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    if sigma is None:
        sigma, sigma_sqrt = residual_covariance(model, gains.L)
    else:
        sigma_sqrt = symmetric_sqrt(sigma)
    return gains.L @ sigma @ gains.L.T, sigma_sqrt


def shape_term_sequences(
    model: PlantModel,
    gains: GainPair,
    detector: DetectorConfig,
    truncation: NoiseTruncation,
    k: int,
    sigma: Optional[np.ndarray] = None,
) -> ReachabilityTerms:
    """
    Shape matrices nu_bar F^i R1 F^i^T and alpha H_i L Sigma L^T H_i^T for i = 0..k.

    ``sigma`` overrides the residual covariance; otherwise it follows from L.
    """
    gains.check_dimensions(model)
    closed_loop = model.F + model.G @ gains.K
    require_stable(closed_loop, 'F + GK')
    require_stable(model.F - gains.L @ model.C, 'F - LC')
    attack_shape, sigma_sqrt = _attack_shape(model, gains, sigma)

    q_nu, q_delta, h_list, f_powers = [], [], [], []
    power_f = np.eye(model.n)
    power_cl = np.eye(model.n)
    for _ in range(k + 1):
        h = power_cl - power_f
        q_nu.append(truncation.nu_bar * power_f @ model.R1 @ power_f.T)
        q_delta.append(detector.alpha * h @ attack_shape @ h.T)
        h_list.append(h)
        f_powers.append(power_f)
        power_f = model.F @ power_f
        power_cl = closed_loop @ power_cl

    return ReachabilityTerms(
        q_nu=q_nu,
        q_delta=q_delta,
        h=h_list,
        f_powers=f_powers,
        horizon=k,
        alpha=detector.alpha,
        nu_bar=truncation.nu_bar,
        attack_shape=attack_shape,
        sigma_sqrt=sigma_sqrt,
    )


def settling_horizon(
    model: PlantModel,
    gains: GainPair,
    detector: DetectorConfig,
    truncation: NoiseTruncation,
    eps: Optional[float] = None,
    cap: Optional[int] = None,
) -> int:
    """Smallest k >= 1 with |Q*_k - Q*_(k-1)|_F <= eps |Q*_(k-1)|_F."""
    eps = HORIZON_EPS if eps is None else eps
    cap = HORIZON_CAP if cap is None else cap
    closed_loop = model.F + model.G @ gains.K
    closed_loop_radius = require_stable(closed_loop, 'F + GK')
    open_loop_radius = require_stable(model.F, 'F')
    require_stable(model.F - gains.L @ model.C, 'F - LC')
    attack_shape, _ = _attack_shape(model, gains, None)

    ratio = max(closed_loop_radius, open_loop_radius)
    if 0 < ratio:
        estimate = math.ceil(math.log(eps * (1 - ratio)) / math.log(ratio))
        logger.debug(f"Ratio test suggests a horizon near {estimate} (ratio {ratio:.4f})")
        if estimate > cap:
            logger.warning(f"Ratio test estimate {estimate} exceeds the horizon cap {cap}")

    bound = _RunningBound(model.n)
    power_f = np.eye(model.n)
    power_cl = np.eye(model.n)
    previous = None
    for k in range(cap + 1):
        h = power_cl - power_f
        bound.add(truncation.nu_bar * power_f @ model.R1 @ power_f.T)
        bound.add(detector.alpha * h @ attack_shape @ h.T)
        current = bound.shape
        if previous is not None:
            change = np.linalg.norm(current - previous, ord='fro')
            if change <= eps * np.linalg.norm(previous, ord='fro'):
                logger.info(f"Reachable-set bound settled at k* = {k} (eps {eps:.1e})")
                return k
        previous = current
        power_f = model.F @ power_f
        power_cl = closed_loop @ power_cl

    logger.error(f"Reachable-set bound did not settle within {cap} steps")
    raise HorizonNotSettledException(
        f"Reachable-set bound did not settle within {cap} steps "
        f"(spectral radii: F + GK {closed_loop_radius:.6f}, F {open_loop_radius:.6f})",
        closed_loop_radius=closed_loop_radius,
        open_loop_radius=open_loop_radius,
    )


def reachable_outer_bound(terms: ReachabilityTerms) -> Ellipsoid:
    return GeometricSumService.min_trace_sum(terms.merged())


def prefix_bounds(terms: ReachabilityTerms) -> List[Ellipsoid]:
    """Q*_j over the terms i <= j, for j = 0..horizon."""
    bound = _RunningBound(terms.attack_shape.shape[0])
    bounds = []
    for q_nu, q_delta in zip(terms.q_nu, terms.q_delta):
        bound.add(q_nu)
        bound.add(q_delta)
        bounds.append(Ellipsoid(bound.shape))
    return bounds


def sqrt_trace_profile(terms: ReachabilityTerms) -> np.ndarray:
    """sqrt(tr Q*_j) for j = 0..horizon; nondecreasing in j."""
    increments = [
        math.sqrt(max(float(np.trace(q_nu)), 0.0)) + math.sqrt(max(float(np.trace(q_delta)), 0.0))
        for q_nu, q_delta in zip(terms.q_nu, terms.q_delta)
    ]
    return np.cumsum(increments)


def attack_objective(terms: ReachabilityTerms) -> float:
    """Sum over i >= 1 of sqrt(tr(H_i L Sigma L^T H_i^T)); neither alpha nor noise enters."""
    total = 0.0
    for h in terms.h[1:]:
        total += math.sqrt(max(float(np.trace(h @ terms.attack_shape @ h.T)), 0.0))
    return total


def gain_attack_objective(
    model: PlantModel, gains: GainPair, k: int, sigma: Optional[np.ndarray] = None
) -> float:
    """``attack_objective`` straight from the gains, without building the shape terms."""
    attack_shape, _ = _attack_shape(model, gains, sigma)
    closed_loop = model.F + model.G @ gains.K
    power_f = model.F.copy()
    power_cl = closed_loop.copy()
    total = 0.0
    for _ in range(k):
        h = power_cl - power_f
        total += math.sqrt(max(float(np.trace(h @ attack_shape @ h.T)), 0.0))
        power_f = model.F @ power_f
        power_cl = closed_loop @ power_cl
    return total


def exact_reachable_boundary(terms: ReachabilityTerms, directions: np.ndarray) -> np.ndarray:
    """One boundary point of the exact geometric sum per row of ``directions``."""
    shapes = terms.merged()
    return np.array([
        GeometricSumService.minkowski_boundary_point(shapes, ell) for ell in directions
    ])


@dataclass
class ReachabilitySummary:
    k_star: int
    q_star: Ellipsoid
    sqrt_trace_total: float
    attack_objective: float
    noise_only_trace: float
    attack_only_trace: float
    attack_bound: Ellipsoid

    def to_payload(self) -> Dict[str, Any]:
        lengths, axes = self.q_star.principal_axes()
        payload = {
            'k_star': self.k_star,
            'sqrt_trace_qstar': self.sqrt_trace_total,
            'attack_objective': self.attack_objective,
            'noise_only_sqrt_trace': self.noise_only_trace,
            'attack_only_sqrt_trace': self.attack_only_trace,
            'q_star': matrix_to_list(self.q_star.shape),
            'q_star_semi_axes': lengths.tolist(),
            'q_star_axes': matrix_to_list(axes),
            'attack_bound': matrix_to_list(self.attack_bound.shape),
        }
        if self.q_star.dimension == 2:
            payload['q_star_angle'] = float(math.atan2(axes[1, 0], axes[0, 0]))
        return payload


def summarize_reachability(
    model: PlantModel,
    gains: GainPair,
    detector: DetectorConfig,
    truncation: NoiseTruncation,
    k: int,
) -> ReachabilitySummary:
    terms = shape_term_sequences(model, gains, detector, truncation, k)
    q_star = reachable_outer_bound(terms)
    noise_bound = GeometricSumService.min_trace_sum(terms.q_nu)
    attack_bound = GeometricSumService.min_trace_sum(terms.q_delta)
    return ReachabilitySummary(
        k_star=k,
        q_star=q_star,
        sqrt_trace_total=math.sqrt(max(q_star.trace, 0.0)),
        attack_objective=attack_objective(terms),
        noise_only_trace=math.sqrt(max(noise_bound.trace, 0.0)),
        attack_only_trace=math.sqrt(max(attack_bound.trace, 0.0)),
        attack_bound=attack_bound,
    )


def split_trajectory(
    model: PlantModel,
    gains: GainPair,
    sigma_sqrt: np.ndarray,
    nu: np.ndarray,
    delta_bar: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """States x_0..x_k and errors e_0..e_k of the attacked loop from zero."""
    steps = nu.shape[0]
    attack_gain = gains.L @ sigma_sqrt
    closed_loop = model.F + model.G @ gains.K
    x = np.zeros((steps + 1, model.n))
    e = np.zeros((steps + 1, model.n))
    for t in range(steps):
        x[t + 1] = closed_loop @ x[t] - model.G @ gains.K @ e[t] + nu[t]
        e[t + 1] = model.F @ e[t] + nu[t] - attack_gain @ delta_bar[t]
    return x, e


def closed_form_state(
    model: PlantModel,
    gains: GainPair,
    sigma_sqrt: np.ndarray,
    nu: np.ndarray,
    delta_bar: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """x_k and e_k as explicit sums over the input sequences."""
    steps = nu.shape[0]
    attack = delta_bar @ (gains.L @ sigma_sqrt).T
    closed_loop = model.F + model.G @ gains.K
    power_f = np.eye(model.n)
    power_cl = np.eye(model.n)
    x = np.zeros(model.n)
    e = np.zeros(model.n)
    for j in range(steps):
        index = steps - 1 - j
        x += power_f @ nu[index] + (power_cl - power_f) @ attack[index]
        e += power_f @ (nu[index] - attack[index])
        power_f = model.F @ power_f
        power_cl = closed_loop @ power_cl
    return x, e


def decomposed_state(
    model: PlantModel,
    gains: GainPair,
    sigma_sqrt: np.ndarray,
    nu: np.ndarray,
    delta_bar: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Noise-driven and attack-driven parts of x_k from their own recursions:
    x_nu+ = F x_nu + nu, and x_delta = a - b with a+ = (F + GK) a + w, b+ = F b + w.
    """
    attack = delta_bar @ (gains.L @ sigma_sqrt).T
    closed_loop = model.F + model.G @ gains.K
    x_nu = np.zeros(model.n)
    a = np.zeros(model.n)
    b = np.zeros(model.n)
    for t in range(nu.shape[0]):
        x_nu = model.F @ x_nu + nu[t]
        a = closed_loop @ a + attack[t]
        b = model.F @ b + attack[t]
    return x_nu, a - b


@dataclass
class ContainmentReport:
    trials: int
    steps: int
    inside: int
    max_quadratic_form: float
    max_detector_statistic: float
    alarms: int
    max_split_deviation: float
    mode_counts: Dict[str, int] = field(default_factory=dict)

    @property
    def inside_fraction(self) -> float:
        return self.inside / self.trials if self.trials else 1.0

    def to_payload(self) -> Dict[str, Any]:
        return {
            'trials': self.trials,
            'steps': self.steps,
            'inside': self.inside,
            'inside_fraction': self.inside_fraction,
            'max_quadratic_form': self.max_quadratic_form,
            'max_detector_statistic': self.max_detector_statistic,
            'alarms': self.alarms,
            'max_split_deviation': self.max_split_deviation,
            'mode_counts': self.mode_counts,
        }

    @classmethod
    def from_payload(cls, payload: Dict[str, Any]) -> 'ContainmentReport':
        return cls(
            trials=payload['trials'],
            steps=payload['steps'],
            inside=payload['inside'],
            max_quadratic_form=payload['max_quadratic_form'],
            max_detector_statistic=payload['max_detector_statistic'],
            alarms=payload['alarms'],
            max_split_deviation=payload['max_split_deviation'],
            mode_counts=dict(payload['mode_counts']),
        )

    @classmethod
    def merge(cls, reports: Sequence['ContainmentReport']) -> 'ContainmentReport':
        counts: Dict[str, int] = {}
        for report in reports:
            for mode, count in report.mode_counts.items():
                counts[mode] = counts.get(mode, 0) + count
        return cls(
            trials=sum(report.trials for report in reports),
            steps=max(report.steps for report in reports),
            inside=sum(report.inside for report in reports),
            max_quadratic_form=max(report.max_quadratic_form for report in reports),
            max_detector_statistic=max(report.max_detector_statistic for report in reports),
            alarms=sum(report.alarms for report in reports),
            max_split_deviation=max(report.max_split_deviation for report in reports),
            mode_counts=counts,
        )


def trial_generator(seed: int, trial_index: int) -> np.random.Generator:
    """Counter-based stream for one trial, independent of batching and worker count."""
    return np.random.Generator(np.random.Philox(key=seed, counter=trial_index << 192))


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    draws = rng.standard_normal((rows, dim))
    return draws / np.linalg.norm(draws, axis=1, keepdims=True)


def _uniform_in_ellipsoid(rng: np.random.Generator, root: np.ndarray, rows: int) -> np.ndarray:
    dim = root.shape[0]
    radii = rng.random(rows) ** (1.0 / dim)
    return (_unit_rows(rng, rows, dim) * radii[:, np.newaxis]) @ root.T


def _support_inputs(terms: ReachabilityTerms, model: PlantModel, gains: GainPair, ell: np.ndarray, steps: int):
    """Inputs that push x_steps to the boundary point of the exact sum along ``ell``."""
    nu = np.zeros((steps, model.n))
    delta_bar = np.zeros((steps, model.p))
    noise_shape = terms.nu_bar * model.R1
    attack_gain = gains.L @ terms.sigma_sqrt
    for j in range(steps):
        index = steps - 1 - j
        pulled = terms.f_powers[j].T @ ell
        quadratic = float(pulled @ noise_shape @ pulled)
        if quadratic > TRACE_EPS * max(float(np.trace(noise_shape)), 1e-300):
            nu[index] = noise_shape @ pulled / math.sqrt(quadratic)
        direction = (terms.h[j] @ attack_gain).T @ ell
        norm = np.linalg.norm(direction)
        if norm > 0:
            delta_bar[index] = math.sqrt(terms.alpha) * direction / norm
    return nu, delta_bar


def simulate_batch(
    model: PlantModel,
    gains: GainPair,
    detector: DetectorConfig,
    truncation: NoiseTruncation,
    k: int,
    seed: int,
    start: int,
    count: int,
) -> ContainmentReport:
    """
    Trials ``start .. start + count - 1``, vectorized across the batch.

    The split recursions are checked against Q*_(t-1) at every step t; the
    physical loop (plant, estimator, detector) runs alongside on the same inputs
    to confirm that the detector statistic never exceeds alpha.
    """
    terms = shape_term_sequences(model, gains, detector, truncation, k)
    bounds = prefix_bounds(terms)
    n, p = model.n, model.p
    F, G, C, L, K = model.F, model.G, model.C, gains.L, gains.K
    sigma_sqrt = terms.sigma_sqrt
    sigma_inverse = np.linalg.inv(sigma_sqrt @ sigma_sqrt)
    attack_radius = math.sqrt(detector.alpha)
    noise_root = symmetric_sqrt(truncation.nu_bar * model.R1)
    sensor_root = symmetric_sqrt(truncation.eta_bar * model.R2)

    nu = np.zeros((count, k, n))
    eta = np.zeros((count, k, p))
    delta_bar = np.zeros((count, k, p))
    modes = np.array([(start + row) % len(SIMULATION_MODES) for row in range(count)])
    for row in range(count):
        rng = trial_generator(seed, start + row)
        nu[row] = _uniform_in_ellipsoid(rng, noise_root, k)
        eta[row] = _uniform_in_ellipsoid(rng, sensor_root, k)
        directions = _unit_rows(rng, k, p)
        shrink = rng.random(k) ** (1.0 / p)
        ell = _unit_rows(rng, 1, n)[0]

        mode = SIMULATION_MODES[modes[row]]
        if mode == 'boundary':
            delta_bar[row] = attack_radius * directions
        elif mode == 'interior':
            delta_bar[row] = attack_radius * directions * shrink[:, np.newaxis]
        elif mode == 'support':
            nu[row], delta_bar[row] = _support_inputs(terms, model, gains, ell, k)

    greedy = modes == SIMULATION_MODES.index('greedy')
    # top right singular vector of G K L Sigma^(1/2): largest two-step push on x
    push = G @ K @ L @ sigma_sqrt
    _, _, right = np.linalg.svd(push)
    greedy_direction = right[0]
    greedy_image = push @ greedy_direction

    closed_loop = F + G @ K
    x = np.zeros((count, n))
    e = np.zeros((count, n))
    plant = np.zeros((count, n))
    estimate = np.zeros((count, n))
    worst = np.zeros(count)
    max_statistic = 0.0
    alarms = 0
    deviation = 0.0

    for t in range(k):
        attack_t = delta_bar[:, t, :].copy()
        if greedy.any():
            signs = np.where(x[greedy] @ greedy_image >= 0, 1.0, -1.0)
            attack_t[greedy] = attack_radius * signs[:, np.newaxis] * greedy_direction
        injected = attack_t @ (L @ sigma_sqrt).T

        x_next = x @ closed_loop.T - e @ (G @ K).T + nu[:, t]
        e_next = e @ F.T + nu[:, t] - injected

        control = estimate @ K.T
        sensor_attack = -(plant - estimate) @ C.T - eta[:, t] + attack_t @ sigma_sqrt.T
        output = plant @ C.T + eta[:, t] + sensor_attack
        residual = output - estimate @ C.T
        statistic = np.einsum('bi,ij,bj->b', residual, sigma_inverse, residual)
        max_statistic = max(max_statistic, float(statistic.max()))
        alarms += int(np.sum(statistic > detector.alpha * (1 + MEMBERSHIP_TOLERANCE)))
        plant = plant @ F.T + control @ G.T + nu[:, t]
        estimate = estimate @ F.T + control @ G.T + residual @ L.T

        x, e = x_next, e_next
        deviation = max(deviation, float(np.max(np.abs(plant - x))))
        worst = np.maximum(worst, bounds[t].quadratic_forms(x))

    inside = int(np.sum(worst <= 1.0 + MEMBERSHIP_TOLERANCE))
    counts = {mode: int(np.sum(modes == index)) for index, mode in enumerate(SIMULATION_MODES)}
    logger.debug(f"Simulated trials {start}..{start + count - 1}: {inside}/{count} contained")
    return ContainmentReport(
        trials=count,
        steps=k,
        inside=inside,
        max_quadratic_form=float(worst.max()) if count else 0.0,
        max_detector_statistic=max_statistic,
        alarms=alarms,
        max_split_deviation=deviation,
        mode_counts=counts,
    )


def simulation_payload(
    model: PlantModel,
    gains: GainPair,
    detector: DetectorConfig,
    truncation: NoiseTruncation,
    k: int,
    seed: int,
) -> Dict[str, Any]:
    return {
        'model': model.to_payload(),
        'gains': gains.to_payload(),
        'false_alarm_rate': detector.false_alarm_rate,
        'alpha': detector.alpha,
        'p_bar': truncation.p_bar,
        'k': k,
        'seed': seed,
    }


def simulate_attacked_trajectories(
    model: PlantModel,
    gains: GainPair,
    detector: DetectorConfig,
    truncation: NoiseTruncation,
    trials: int,
    k: int,
    seed: int,
    batch_size: Optional[int] = None,
) -> ContainmentReport:
    from .tasks import collect, simulate_trajectory_batch

    batch_size = batch_size or SIMULATION_BATCH
    payload = simulation_payload(model, gains, detector, truncation, k, seed)
    batches = [
        (start, min(batch_size, trials - start)) for start in range(0, trials, batch_size)
    ]
    results = collect(simulate_trajectory_batch.s(payload, start, count) for start, count in batches)

    failed = [result for result in results if result['status'] != 'completed']
    if failed:
        logger.error(f"{len(failed)} simulation batches failed: {failed[0]['error']}")
        raise CodesignException(f"Simulation batch failed: {failed[0]['error']}")

    report = ContainmentReport.merge([ContainmentReport.from_payload(result['report']) for result in results])
    logger.info(
        f"Simulated {report.trials} trials over {k} steps: "
        f"{report.inside_fraction:.6f} contained, max form {report.max_quadratic_form:.6f}"
    )
    return report
