import numpy as np
import pytest

from clhmc.config import STATIC_1D_COMPONENTS
from clhmc.harness import gmm_from_components


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def truth_1d():
    return gmm_from_components(STATIC_1D_COMPONENTS)


def pytest_terminal_summary(terminalreporter):
    """Print one line per acceptance criterion that ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
