"""Collects acceptance-criterion verdicts and prints them after the run."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict(request):
    """Call ``verdict(n, ok, detail)`` once per criterion; the line is printed
    in the terminal summary and the test fails when ``ok`` is false."""

    def record(number: int, ok: bool, detail: str):
        _VERDICTS.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, f"criterion {number} not met: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
