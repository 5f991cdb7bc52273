import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("ci", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def tiny_overrides():
    """Reduced sizes so model studies run in seconds."""
    return {
        "splits": {"train": 300, "validation": 100, "test": 200},
        "train": {"epochs": 1, "seeds": [0]},
        "model": {"hidden": 8, "latent": 4},
    }


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[number].line())
