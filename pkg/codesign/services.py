import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from django.conf import settings
from rest_framework.exceptions import ParseError
from rest_framework.parsers import JSONParser
from rest_framework.renderers import JSONRenderer

from .design import DesignProblem, design_gains, tradeoff_sweep, trivial_solution_check
from .ellipsoid import direction_grid
from .exceptions import CodesignException, InvalidConfigException, UnknownCommandException
from .lti_model import (
    DetectorConfig,
    GainPair,
    ModelDiagnostics,
    NoiseTruncation,
    PlantModel,
    assemble_closed_loop,
    matrix_to_list,
    validate_model,
)
from .performance import SolverConfig, min_occ_gain, occ_gain, open_loop_gain
from .reachability import (
    exact_reachable_boundary,
    reachable_outer_bound,
    settling_horizon,
    shape_term_sequences,
    simulate_attacked_trajectories,
    summarize_reachability,
)
from .serializers import GainsConfigSerializer, RunConfigSerializer

logger = logging.getLogger(__name__)

COMMANDS = ('analyze', 'gamma-bounds', 'design', 'sweep', 'boundary', 'simulate', 'check-trivial')

DEFAULT_SWEEP_STEPS = 12
DEFAULT_DIRECTIONS = 360
DEFAULT_TRIALS = 1000


@dataclass
class RunConfig:
    source: str
    resolved: Dict[str, Any]
    model: PlantModel
    diagnostics: ModelDiagnostics
    detector: DetectorConfig
    truncation: NoiseTruncation
    solver: SolverConfig
    horizon_k: Optional[int] = None
    horizon_eps: Optional[float] = None
    gains: Optional[GainPair] = None
    options: Dict[str, Any] = field(default_factory=dict)

    @property
    def warnings(self) -> List[str]:
        return list(self.diagnostics.warnings)


def _flatten_errors(detail, prefix='') -> List[str]:
    if isinstance(detail, dict):
        messages = []
        for key, value in detail.items():
            if key == 'non_field_errors':
                path = prefix
            else:
                path = f"{prefix}.{key}" if prefix else str(key)
            messages.extend(_flatten_errors(value, path))
        return messages
    if isinstance(detail, list):
        messages = []
        for item in detail:
            messages.extend(_flatten_errors(item, prefix))
        return messages
    return [f"{prefix or 'config'}: {detail}"]


def build_run_config(data: Any, source: str = '<config>') -> RunConfig:
    serializer = RunConfigSerializer(data=data)
    if not serializer.is_valid():
        messages = _flatten_errors(serializer.errors)
        logger.error(f"Invalid configuration {source}: {'; '.join(messages)}")
        raise InvalidConfigException(f"{source}: " + '; '.join(messages))
    resolved = serializer.validated_data

    model_data = resolved['model']
    try:
        model = PlantModel(
            F=model_data['F'], G=model_data['G'], C=model_data['C'],
            R1=model_data['R1'], R2=model_data['R2'],
        )
        diagnostics = validate_model(model)
        detector = DetectorConfig(
            false_alarm_rate=resolved['detector']['false_alarm_rate'],
            p=model.p,
            alpha=resolved['detector'].get('alpha'),
        )
        truncation = NoiseTruncation(p_bar=resolved['truncation']['p_bar'], n=model.n, p=model.p)
    except InvalidConfigException:
        raise
    except CodesignException as e:
        logger.error(f"Invalid model in {source}: {e}")
        raise InvalidConfigException(f"{source}: {e}")

    gains = GainPair.from_payload(resolved['gains']) if resolved.get('gains') else None
    return RunConfig(
        source=source,
        resolved=resolved,
        model=diagnostics.model,
        diagnostics=diagnostics,
        detector=detector,
        truncation=truncation,
        solver=SolverConfig(**resolved['solver']),
        horizon_k=resolved['horizon'].get('k'),
        horizon_eps=resolved['horizon'].get('eps'),
        gains=gains,
        options=dict(resolved['options']),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with path.open('rb') as stream:
            data = JSONParser().parse(stream)
    except FileNotFoundError:
        logger.error(f"Configuration file {path} not found")
        raise InvalidConfigException(f"{path}: file not found")
    except ParseError as e:
        logger.error(f"Could not parse {path}: {e.detail}")
        raise InvalidConfigException(f"{path}: {e.detail}")

    config = build_run_config(data, str(path))
    logger.info(f"Loaded configuration {path} (n={config.model.n}, m={config.model.m}, p={config.model.p})")
    return config


def load_gains(path, model: PlantModel) -> GainPair:
    path = Path(path)
    try:
        with path.open('rb') as stream:
            data = JSONParser().parse(stream)
    except FileNotFoundError:
        raise InvalidConfigException(f"{path}: file not found")
    except ParseError as e:
        raise InvalidConfigException(f"{path}: {e.detail}")

    serializer = GainsConfigSerializer(data=data)
    if not serializer.is_valid():
        raise InvalidConfigException(f"{path}: " + '; '.join(_flatten_errors(serializer.errors)))
    gains = GainPair.from_payload(serializer.validated_data)
    try:
        gains.check_dimensions(model)
    except CodesignException as e:
        raise InvalidConfigException(f"{path}: {e}")
    return gains


def round_significant(value, digits: Optional[int] = None):
    """Recursively round floats to ``digits`` significant digits; non-finite values become null."""
    digits = digits or settings.CODESIGN['OUTPUT_PRECISION']
    if isinstance(value, dict):
        return {key: round_significant(item, digits) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [round_significant(item, digits) for item in value]
    if isinstance(value, np.ndarray):
        return round_significant(value.tolist(), digits)
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        return float(f"{value:.{digits}g}")
    return value


def _format_cell(value, digits: int) -> str:
    if value is None:
        return ''
    if isinstance(value, float) or isinstance(value, np.floating):
        return f"{float(value):.{digits}g}"
    return str(value)


@dataclass
class ResultEnvelope:
    command: str
    config: Dict[str, Any]
    settings: Dict[str, Any]
    payload: Dict[str, Any]
    warnings: List[str] = field(default_factory=list)
    version: str = ''
    table: Optional[Tuple[List[str], List[List[Any]]]] = None

    def to_payload(self) -> Dict[str, Any]:
        return round_significant({
            'version': self.version,
            'command': self.command,
            'config': self.config,
            'settings': self.settings,
            'warnings': self.warnings,
            'payload': self.payload,
        })

    def render_json(self) -> bytes:
        return JSONRenderer().render(self.to_payload(), renderer_context={'indent': 2}) + b'\n'

    def render_csv(self) -> Optional[str]:
        if self.table is None:
            return None
        digits = settings.CODESIGN['OUTPUT_PRECISION']
        header, rows = self.table
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator='\n')
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(value, digits) for value in row])
        return buffer.getvalue()

    def write(self, output_dir) -> List[Path]:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        stem = self.command.replace('-', '_')
        written = [output_dir / f"{stem}.json"]
        written[0].write_bytes(self.render_json())
        table = self.render_csv()
        if table is not None:
            written.append(output_dir / f"{stem}.csv")
            written[1].write_text(table, encoding='utf-8')
        logger.info(f"Wrote {', '.join(str(path) for path in written)}")
        return written


def gain_columns(model: PlantModel) -> List[str]:
    columns = [f"L_{i + 1}_{j + 1}" for i in range(model.n) for j in range(model.p)]
    columns += [f"K_{i + 1}_{j + 1}" for i in range(model.m) for j in range(model.n)]
    return columns


class CommandProcessor:
    def __init__(self, config: RunConfig, options: Optional[Dict[str, Any]] = None):
        self.config = config
        self.warnings: List[str] = []
        self.options = dict(config.options)
        self.options.update({key: value for key, value in (options or {}).items() if value is not None})

    @property
    def model(self) -> PlantModel:
        return self.config.model

    def dispatch(self, command: str) -> ResultEnvelope:
        handlers = {
            'analyze': self._process_analyze,
            'gamma-bounds': self._process_gamma_bounds,
            'design': self._process_design,
            'sweep': self._process_sweep,
            'boundary': self._process_boundary,
            'simulate': self._process_simulate,
            'check-trivial': self._process_check_trivial,
        }
        handler = handlers.get(command)
        if handler is None:
            logger.error(f"Unknown command: {command}")
            raise UnknownCommandException(
                f"Unknown command '{command}' (expected one of: {', '.join(COMMANDS)})"
            )

        self.warnings = list(self.config.warnings)
        try:
            payload, table = handler()
        except CodesignException as e:
            e.args = (f"{command}: {e}",) + e.args[1:]
            raise

        logger.info(f"Command {command} completed")
        return ResultEnvelope(
            command=command,
            config=self._resolved_config(),
            settings=self._settings(),
            payload=payload,
            warnings=list(self.warnings),
            version=settings.CODESIGN['VERSION'],
            table=table,
        )

    def _resolved_config(self) -> Dict[str, Any]:
        resolved = dict(self.config.resolved)
        resolved['detector'] = {
            'false_alarm_rate': self.config.detector.false_alarm_rate,
            'alpha': self.config.detector.alpha,
        }
        resolved['truncation'] = {
            'p_bar': self.config.truncation.p_bar,
            'nu_bar': self.config.truncation.nu_bar,
            'eta_bar': self.config.truncation.eta_bar,
        }
        resolved['options'] = self.options
        return resolved

    def _settings(self) -> Dict[str, Any]:
        skipped = {'SOLVER', 'OUTPUT_DIR', 'VERSION'}
        values = {key.lower(): value for key, value in settings.CODESIGN.items() if key not in skipped}
        values['solver'] = self.config.solver.to_payload()
        values['model_check'] = self.config.diagnostics.to_payload()
        return values

    def _require_gains(self) -> GainPair:
        if self.config.gains is None:
            raise InvalidConfigException("this command needs 'gains' (L and K) in the configuration")
        return self.config.gains

    def _require_option(self, name: str):
        value = self.options.get(name)
        if value is None:
            raise InvalidConfigException(f"missing required option '{name}'")
        return value

    def _horizon(self, gains: GainPair) -> int:
        k = self.options.get('k')
        if k is None:
            k = self.config.horizon_k
        if k is not None:
            if int(k) < 1:
                raise InvalidConfigException(f"horizon k must be at least 1, got {k}")
            return int(k)
        return settling_horizon(
            self.model, gains, self.config.detector, self.config.truncation, eps=self.config.horizon_eps
        )

    def _design_horizon(self) -> int:
        # the settling test runs on the open loop before any gains are known
        return self._horizon(GainPair.zero(self.model))

    def _process_analyze(self):
        gains = self._require_gains()
        occ = occ_gain(self.model, gains)
        realization = assemble_closed_loop(self.model, gains)
        k = self._horizon(gains)
        summary = summarize_reachability(self.model, gains, self.config.detector, self.config.truncation, k)
        estimator_radius, regulator_radius = gains.radii(self.model)
        return {
            'gains': gains.to_payload(),
            'gamma': occ.gamma,
            'p_x': matrix_to_list(occ.p_x),
            'p_e': matrix_to_list(realization.P_e),
            'sigma': matrix_to_list(realization.Sigma),
            'estimator_radius': estimator_radius,
            'regulator_radius': regulator_radius,
            'reachability': summary.to_payload(),
        }, None

    def _process_gamma_bounds(self):
        gamma_open_loop = open_loop_gain(self.model)
        k = self._design_horizon()
        result = min_occ_gain(self.model, self.config.solver, k)
        self.warnings.extend(result.warnings)
        detector, truncation = self.config.detector, self.config.truncation
        open_loop = summarize_reachability(self.model, GainPair.zero(self.model), detector, truncation, k)
        at_minimum = summarize_reachability(self.model, result.gains, detector, truncation, k)
        return {
            'k_star': k,
            'gamma_open_loop': gamma_open_loop,
            'open_loop_sqrt_trace_qstar': open_loop.sqrt_trace_total,
            'gamma_star': result.gamma_star,
            'minimum': result.to_payload(),
            'minimum_sqrt_trace_qstar': at_minimum.sqrt_trace_total,
            'minimum_reachability': at_minimum.to_payload(),
        }, None

    def _process_design(self):
        gamma_bar = float(self._require_option('gamma_bar'))
        k = self._design_horizon()
        problem = DesignProblem(
            self.model, self.config.detector, self.config.truncation, gamma_bar, k, self.config.solver
        )
        point = design_gains(problem)
        self.warnings.extend(point.warnings)
        payload = point.to_payload()
        payload.update({
            'k_star': k,
            'gamma_open_loop': problem.gamma_open_loop,
            'gamma_star': problem.gamma_star,
        })
        return payload, None

    def _process_sweep(self):
        k = self._design_horizon()
        gamma_lo = float(self._require_option('gamma_from'))
        gamma_hi = self.options.get('gamma_to')
        if gamma_hi is None:
            gamma_hi = open_loop_gain(self.model)
        steps = int(self.options.get('steps') or DEFAULT_SWEEP_STEPS)
        points = tradeoff_sweep(
            self.model, self.config.detector, self.config.truncation,
            gamma_lo, float(gamma_hi), steps, self.config.solver, k,
        )

        header = ['gamma_bar', 'sqrt_trace_qstar', 'attack_objective', 'lambda', 'residual']
        header += gain_columns(self.model)
        rows = []
        for point in points:
            entries = (
                list(point.gains.as_vector()) if point.gains is not None
                else [None] * (len(header) - 5)
            )
            rows.append([
                point.gamma_bar, point.sqrt_trace_qstar, point.attack_objective,
                point.multiplier, point.residual_norm,
            ] + entries)
        for point in points:
            self.warnings.extend(point.warnings)
        failed = sum(1 for point in points if point.status == 'failed')
        return {
            'k_star': k,
            'steps': steps,
            'failed': failed,
            'points': [point.to_payload() for point in points],
        }, (header, rows)

    def _process_boundary(self):
        gains = self._require_gains()
        k = self._horizon(gains)
        count = int(self.options.get('directions') or DEFAULT_DIRECTIONS)
        seed = int(self.options.get('seed', self.config.solver.seed))
        directions = direction_grid(self.model.n, count, seed)

        terms = shape_term_sequences(self.model, gains, self.config.detector, self.config.truncation, k)
        points = exact_reachable_boundary(terms, directions)
        q_star = reachable_outer_bound(terms)
        gaps = [q_star.support(ell) - float(ell @ x) for ell, x in zip(directions, points)]
        summary = summarize_reachability(self.model, gains, self.config.detector, self.config.truncation, k)

        n = self.model.n
        if n == 2:
            header = ['ell_angle']
            leading = [[math.atan2(ell[1], ell[0])] for ell in directions]
        else:
            header = [f"ell_{i + 1}" for i in range(n)]
            leading = [list(ell) for ell in directions]
        header += [f"x_{i + 1}" for i in range(n)]
        rows = [lead + list(x) for lead, x in zip(leading, points)]
        return {
            'k': k,
            'directions': len(directions),
            'min_support_gap': min(gaps),
            'reachability': summary.to_payload(),
        }, (header, rows)

    def _process_simulate(self):
        gains = self._require_gains()
        k = self._horizon(gains)
        trials = int(self.options.get('trials') or DEFAULT_TRIALS)
        seed = int(self.options.get('seed', self.config.solver.seed))
        report = simulate_attacked_trajectories(
            self.model, gains, self.config.detector, self.config.truncation, trials, k, seed
        )
        payload = report.to_payload()
        payload.update({'k': k, 'seed': seed, 'alpha': self.config.detector.alpha})
        return payload, None

    def _process_check_trivial(self):
        return trivial_solution_check(self.model).to_payload(), None
