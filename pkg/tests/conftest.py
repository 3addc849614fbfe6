"""Collects results of tests tagged ``@pytest.mark.criterion(...)`` and prints
one PASS/FAIL line per acceptance criterion at the end of the run."""

from __future__ import annotations

import pytest

_outcomes: dict[str, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion this test establishes")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    report = outcome.get_result()
    label = marker.args[0]
    if report.failed or (report.when == "call" and report.skipped):
        _outcomes[label] = "FAIL"
    elif report.when == "call":
        _outcomes.setdefault(label, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_outcomes, key=lambda s: int(s.split()[0][2:])):
        terminalreporter.write_line(f"{_outcomes[label]}  {label}")
