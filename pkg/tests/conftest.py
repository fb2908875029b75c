import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from msdiar.embeddings import SyntheticSessionSpec, synthesize_session

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_session():
    """3 speakers, 30 s, default per-scale noise."""
    return synthesize_session(SyntheticSessionSpec(num_speakers=3, duration=30.0, seed=7, session_id="small"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_tuples(rng, n, scales=3, dim=256):
    x = rng.standard_normal((n, scales, dim))
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
