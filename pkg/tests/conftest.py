import sys

import pytest

from dffw.data import BallSimConfig, generate_dataset


@pytest.fixture(scope="session")
def balls():
    """The default 4 x 11 x 400 spinning-ball dataset."""
    return generate_dataset(BallSimConfig(seed=0))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
