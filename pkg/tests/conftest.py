"""Shared test plumbing: acceptance-criterion reporting.

Criterion tests record a ``[PASS] criterion N: ...`` line through the
``criterion_report`` fixture; the lines are echoed in a terminal summary
section so they survive pytest's output capture.
"""

import pytest

_criterion_lines: list[str] = []


@pytest.fixture
def criterion_report():
    def _report(criterion: int, detail: str) -> None:
        line = f"[PASS] criterion {criterion}: {detail}"
        print(line)
        _criterion_lines.append(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
