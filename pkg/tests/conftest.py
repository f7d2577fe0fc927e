"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end of the run."""

import pytest

_LINES: dict[str, str] = {}


@pytest.fixture
def criterion(request):
    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} ({detail})"
        _LINES[request.node.nodeid] = line
        print(line)
        assert ok, line
    return record


def pytest_runtest_logreport(report):
    # a criterion that raised before recording still gets a FAIL line
    if report.when == "call" and report.failed and "test_acceptance" in report.nodeid:
        _LINES.setdefault(report.nodeid, f"[FAIL] {report.nodeid.split('::')[-1]} (raised before completing)")


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES.values():
            terminalreporter.write_line(line)
