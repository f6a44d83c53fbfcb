import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tiltopt.statespace import build_model, default_config

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_model():
    return build_model(default_config())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_model(max_order=2, drift_order=2, **overrides):
    cfg = default_config(max_order=max_order, drift_order=drift_order)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return build_model(cfg)
