"""Shared fixtures: acceptance criteria report one pass/fail line each."""

import contextlib
import time

import pytest

_CRITERIA = []


@pytest.fixture
def criterion():
    @contextlib.contextmanager
    def record(number, title):
        start = time.perf_counter()
        ok = False
        try:
            yield
            ok = True
        finally:
            line = f"AC{number:>2} {'PASS' if ok else 'FAIL'}  {title}  ({time.perf_counter() - start:.1f}s)"
            _CRITERIA.append((number, line))
            print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)
