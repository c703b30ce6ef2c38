import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from metaembed.data import SyntheticConfig, generate_synthetic

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


SMALL = SyntheticConfig(
    n_patients=80, n_codes=60, mean_codes_per_visit=5.0, n_clusters=4,
    n_relation_pairs=3, motif_codes=1, n_labs=4, n_tokens=40,
    n_similarity_pairs=60,
)


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SMALL, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance results, filled by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
