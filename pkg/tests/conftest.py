import logging
import os

import hypothesis
import pytest

from tests.helpers import unit_matrix

hypothesis.settings.register_profile("fast", max_examples=20, deadline=None)
hypothesis.settings.register_profile("ci", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: acceptance-scale runs (training, sweeps)")


@pytest.fixture(autouse=True)
def _propagate_densratio_logs():
    # setup_logging() turns propagation off; caplog listens on the root logger
    logging.getLogger("densratio").propagate = True
    yield


@pytest.fixture
def images():
    return unit_matrix(40, 6, "image", seed=1, prefix="img")


@pytest.fixture
def texts():
    return unit_matrix(30, 6, "text", seed=2, prefix="txt")
