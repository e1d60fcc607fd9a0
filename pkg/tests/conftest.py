import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))  # make tests/oracles.py importable

ACCEPTANCE_LINES = []


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="also run long large-scale checks")


@pytest.fixture
def run_slow(request):
    return request.config.getoption("--runslow") or os.environ.get("MULTIDR_RUN_SLOW") == "1"


@pytest.fixture
def report_line():
    """Record one acceptance PASS/FAIL line; lines are printed in the terminal summary."""

    def record(criterion, passed, detail):
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        line = f"{status} [{criterion}] {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
