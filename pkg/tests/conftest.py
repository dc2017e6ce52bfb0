"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""
import pytest

_LINES = {}


@pytest.fixture
def verdict():
    """``verdict(number, ok, detail)`` records the line for one criterion."""
    def record(number, ok, detail):
        _LINES[str(number)] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(_LINES[str(number)])
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_LINES):
        terminalreporter.write_line(_LINES[number])
