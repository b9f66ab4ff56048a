"""Shared pytest wiring.

The acceptance tests record one verdict line per criterion through the
``acceptance_report`` fixture; the terminal-summary hook replays those lines
after the run so they stay visible even though pytest captures stdout.
"""
import pytest

_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_report():
    def record(line: str) -> None:
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.line(line)
