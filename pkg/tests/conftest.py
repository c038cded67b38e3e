import math

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from nfisac.array import PolarPoint, UlaConfig
from nfisac.optimizer import DesignScenario

settings.register_profile("nfisac", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("nfisac")

DESK_POWER = 0.1 * 65 / 17


def random_users(cfg, k, rng):
    return [PolarPoint(rng.uniform(cfg.fresnel_bound, cfg.rayleigh_distance),
                       math.radians(rng.uniform(30.0, 150.0))) for _ in range(k)]


def desk_scenario(seed=0, k=4, r_min=5.0, num_rf=None, n=17, p_max=DESK_POWER):
    cfg = UlaConfig.from_aperture(n, 0.5, 28e9)
    users = random_users(cfg, k, np.random.default_rng(seed))
    return DesignScenario.create(cfg, users, PolarPoint.from_degrees(20.0, 45.0), p_max=p_max,
                                 noise=1e-9, r_min=r_min, num_rf=num_rf)


def random_psd(rng, n, rank=None, scale=1.0):
    rank = n if rank is None else rank
    A = rng.standard_normal((n, rank)) + 1j * rng.standard_normal((n, rank))
    R = A @ A.conj().T
    return scale * R / np.trace(R).real


@pytest.fixture
def desk():
    return UlaConfig.from_aperture(17, 0.5, 28e9)


@pytest.fixture
def paper_array():
    return UlaConfig.from_aperture(65, 0.5, 28e9)
