import logging

from celery import group, shared_task

from .lti_model import DetectorConfig, GainPair, NoiseTruncation, PlantModel

logger = logging.getLogger(__name__)


def collect(signatures):
    """Run ``signatures`` as a group and return their results in submission order."""
    result = group(list(signatures)).apply_async()
    return [item.get(disable_sync_subtasks=False) for item in result.results]


@shared_task
def min_gain_start(payload, index):
    from .performance import SolverConfig, solve_min_gain_start

    try:
        model = PlantModel.from_payload(payload['model'])
        solver = SolverConfig(**payload['solver'])
        record = solve_min_gain_start(model, solver, payload['k'], index)
        return {'index': index, 'record': record, 'status': 'completed'}

    except Exception as e:
        logger.error(f"Error in minimum-gain start {index}: {str(e)}")
        return {'index': index, 'error': str(e), 'status': 'failed'}


@shared_task
def design_start(payload, start, index):
    from .design import DesignProblem, solve_design_start
    from .performance import SolverConfig

    try:
        model = PlantModel.from_payload(payload['model'])
        # alpha and the truncation level do not enter the stationarity conditions
        problem = DesignProblem(
            model=model,
            detector=None,
            truncation=None,
            gamma_bar=payload['gamma_bar'],
            k_star=payload['k_star'],
            solver=SolverConfig(**payload['solver']),
        )
        record = solve_design_start(problem, GainPair.from_payload(start), index)
        return {'index': index, 'record': record, 'status': 'completed'}

    except Exception as e:
        logger.error(f"Error in design start {index}: {str(e)}")
        return {'index': index, 'error': str(e), 'status': 'failed'}


@shared_task
def simulate_trajectory_batch(payload, start, count):
    from .reachability import simulate_batch

    try:
        model = PlantModel.from_payload(payload['model'])
        detector = DetectorConfig(
            false_alarm_rate=payload['false_alarm_rate'], p=model.p, alpha=payload['alpha']
        )
        truncation = NoiseTruncation(p_bar=payload['p_bar'], n=model.n, p=model.p)
        report = simulate_batch(
            model,
            GainPair.from_payload(payload['gains']),
            detector,
            truncation,
            payload['k'],
            payload['seed'],
            start,
            count,
        )
        return {'start': start, 'report': report.to_payload(), 'status': 'completed'}

    except Exception as e:
        logger.error(f"Error simulating trials {start}..{start + count - 1}: {str(e)}")
        return {'start': start, 'error': str(e), 'status': 'failed'}
