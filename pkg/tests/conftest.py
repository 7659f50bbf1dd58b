import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from keyprop.harness.gradchecks import TINY

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


def randomise(params, rng, scale=0.3):
    """Overwrite every parameter with random values, so no path is trivially zero."""
    for v in params.values():
        v.data = (rng.standard_normal(v.shape) * scale).astype(v.dtype)
    return params


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Shared list of criterion verdict lines, echoed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
