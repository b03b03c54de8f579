import time

import pytest

_RESULTS = []


class Criterion:
    """Records one acceptance line; ``check`` prints it and then asserts."""

    def __init__(self):
        self.t0 = time.perf_counter()

    @property
    def elapsed(self):
        return time.perf_counter() - self.t0

    def check(self, number, title, ok, detail, limit=None):
        took = self.elapsed
        if limit is not None and took >= limit:
            detail += f"; runtime {took:.1f}s exceeds {limit:g}s"
            ok = False
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail}; {took:.1f}s)"
        _RESULTS.append((number, line))
        print(line)
        assert ok, line


@pytest.fixture
def criterion():
    return Criterion()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_RESULTS):
        terminalreporter.write_line(line)
