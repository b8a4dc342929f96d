import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from splitleak.tensor import deterministic  # noqa: E402


@pytest.fixture(autouse=True, scope="session")
def _single_thread():
    deterministic()


def pytest_terminal_summary(terminalreporter):
    import acclog

    if acclog.LINES:
        terminalreporter.section("acceptance")
        for n in sorted(acclog.LINES):
            terminalreporter.write_line(acclog.LINES[n])
