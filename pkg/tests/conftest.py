import sys

import numpy as np
import pytest

from crrr import simlab
from crrr.numeric import RngStream


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def simple_normal_small():
    spec = simlab.DgpSpec("simple-normal", delta=12.0)
    return spec, simlab.generate(spec, 3000, RngStream(11))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
