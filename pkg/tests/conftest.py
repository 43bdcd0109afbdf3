"""Prints one PASS/FAIL line per acceptance criterion at the end of a run."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results = {}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2).replace("_", " "))
    failed = report.failed or (report.when == "call" and report.outcome != "passed")
    if report.when == "call" or failed:
        _results[key] = _results.get(key, True) and not failed


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (num, title), ok in sorted(_results.items()):
        terminalreporter.write_line(f"criterion {num:2d} [{'PASS' if ok else 'FAIL'}] {title}")
