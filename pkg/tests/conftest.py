from __future__ import annotations

import pytest

from helpers import VERDICTS
from switchqkd.scenario import load_scenario


@pytest.fixture(scope="session")
def desk():
    return load_scenario("paper-desk-scale")


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda l: int(l.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
