import sys

import pytest

from dsdfm import rng as rngmod


@pytest.fixture
def rng():
    return rngmod.stream(1234, "tests")


def pytest_terminal_summary(terminalreporter):
    lines = []
    for mod in list(sys.modules.values()):
        lines.extend(getattr(mod, "ACCEPTANCE_RESULTS", []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
