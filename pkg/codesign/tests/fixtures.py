import json
from pathlib import Path

import numpy as np
from django.conf import settings

from codesign.lti_model import GainPair, PlantModel

CASE_STUDY_PATH = Path(settings.BASE_DIR) / 'configs' / 'case_study.json'

# Reference gains for the case study, rounded to two decimals.
GAMMA_STAR_GAINS = GainPair(
    L=[[1.00, -0.97], [-0.01, 0.26]],
    K=[[0.14, -2.04], [-0.44, 1.41]],
)
GAMMA_211_GAINS = GainPair(
    L=[[0.24, -0.21], [0.46, -0.40]],
    K=[[-1.34, -1.70], [0.69, 0.87]],
)


def case_study_payload():
    with open(CASE_STUDY_PATH) as handle:
        return json.load(handle)


def case_study_model() -> PlantModel:
    return PlantModel.from_payload(case_study_payload()['model'])


def random_stable_model(rng, n, m=None, p=None, radius=0.8) -> PlantModel:
    m = m or n
    p = p or n
    F = rng.standard_normal((n, n))
    F *= radius / max(np.abs(np.linalg.eigvals(F)))
    noise = rng.standard_normal((n, n))
    sensor = rng.standard_normal((p, p))
    return PlantModel(
        F=F,
        G=rng.standard_normal((n, m)),
        C=rng.standard_normal((p, n)),
        R1=0.1 * noise @ noise.T + 0.01 * np.eye(n),
        R2=0.1 * sensor @ sensor.T + 0.01 * np.eye(p),
    )


def random_stable_gains(rng, model: PlantModel, scale=0.1, attempts=200) -> GainPair:
    for _ in range(attempts):
        gains = GainPair(
            scale * rng.standard_normal((model.n, model.p)),
            scale * rng.standard_normal((model.m, model.n)),
        )
        if max(gains.radii(model)) < 0.95:
            return gains
    raise AssertionError("No stable random gains found")
