import numpy as np
import pytest

from kamforge.lattice_blocks import LatticeModel


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def plane_model():
    """d*=2 lattice of radius 6 with no tangential or hyperbolic sites."""
    return LatticeModel(2, (), (), 6.0)


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdict lines collected during the session."""
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
