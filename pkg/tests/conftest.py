"""Acceptance bookkeeping: one PASS/FAIL line per criterion in the terminal summary."""

import pytest

_results: dict[int, dict] = {}


@pytest.fixture
def criterion(request):
    """Dict the test fills with a one-line ``detail`` of its measured values."""
    marker = request.node.get_closest_marker("criterion")
    number, title = marker.args
    record = _results.setdefault(number, {"title": title, "detail": "", "passed": True, "ran": False})
    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    record = _results.setdefault(marker.args[0], {"title": marker.args[1], "detail": "", "passed": True, "ran": False})
    record["ran"] = True
    record["passed"] = record["passed"] and report.passed
    if report.failed and not record["detail"]:
        record["detail"] = str(report.longrepr.reprcrash.message).splitlines()[0] if hasattr(report.longrepr, "reprcrash") else "failed"


def pytest_terminal_summary(terminalreporter):
    ran = {n: r for n, r in _results.items() if r["ran"]}
    if not ran:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ran):
        r = ran[number]
        status = "PASS" if r["passed"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {r['title']}: {r['detail']}")
