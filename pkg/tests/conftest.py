import functools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@functools.lru_cache(maxsize=None)
def _scenario(noise_free: bool):
    from pigwatch.synth import ScenarioConfig, generate_static_scenario, zero_noise
    cfg = ScenarioConfig()
    if noise_free:
        cfg = zero_noise(cfg)
    raw, truth = generate_static_scenario(cfg)
    return cfg, raw, truth


@pytest.fixture(scope="session")
def default_scenario():
    return _scenario(False)


@pytest.fixture(scope="session")
def clean_scenario():
    return _scenario(True)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
