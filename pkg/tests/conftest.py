import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line; returns ``ok`` so the caller can assert on it."""

    def record(n, name, ok, detail=""):
        _LINES.append((n, f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {name}  {detail}".rstrip()))
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_LINES):
            terminalreporter.write_line(line)
