import sys

import pytest

_ACCEPTANCE = []


@pytest.fixture
def criterion():
    """Record (and print immediately) one pass/fail line per exit criterion."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        _ACCEPTANCE.append(line)
        print(f"\n{line}", file=sys.__stdout__, flush=True)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
