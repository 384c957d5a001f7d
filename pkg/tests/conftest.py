"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def _status(report) -> str:
    if hasattr(report, "wasxfail"):
        # an expected failure still reports FAIL; the reason points at the analysis
        return "PASS" if report.outcome == "passed" else f"FAIL (known: {report.wasxfail})"
    return {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}.get(report.outcome, report.outcome.upper())


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        measured = "; ".join(f"{k}={v}" for k, v in report.user_properties)
        _RESULTS[number] = (title, _status(report), measured)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, measured = _RESULTS[number]
        line = f"criterion {number:>2} {status}: {title}"
        if measured:
            line += f" [{measured}]"
        terminalreporter.write_line(line)
