"""Shared pytest configuration.

Tests marked ``@pytest.mark.criterion(n, "title")`` are tallied per
criterion; the terminal summary prints one PASS/FAIL line for each, followed
by any values the tests recorded with ``record_property("measured", text)``.
"""

import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    number, title = marker.args
    entry = _results.setdefault(number, {"title": title, "failed": [], "passed": 0, "measured": []})
    if report.when == "call":
        entry["measured"].extend(v for k, v in report.user_properties if k == "measured")
    if report.failed:
        entry["failed"].append(item.name)
    elif report.when == "call" and report.passed:
        entry["passed"] += 1


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        entry = _results[number]
        status = "FAIL" if entry["failed"] else "PASS"
        detail = f" (failed: {', '.join(entry['failed'])})" if entry["failed"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {status}  {entry['title']}{detail}")
        for text in entry["measured"]:
            terminalreporter.write_line(f"    {text}")
