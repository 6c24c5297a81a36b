import numpy as np
import pytest
from hypothesis import settings

from idfree import autodiff as ad
from idfree import synthetic

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def _fresh_autodiff_state():
    yield
    ad.set_precision(32)
    ad.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def two_block():
    """The planted two-community dataset at its default size."""
    return synthetic.two_community()


def pytest_terminal_summary(terminalreporter):
    import acceptance_report
    if acceptance_report.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report.LINES:
            terminalreporter.write_line(line)
