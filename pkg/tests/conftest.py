import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("desk", max_examples=30, deadline=None)
settings.load_profile("desk")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance report: one line per criterion, printed after the run

_CRITERIA: dict[int, dict] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and not report.failed):
        return
    number, title = marker.args
    entry = _CRITERIA.setdefault(number, {"title": title, "passed": True, "details": []})
    entry["passed"] &= report.passed
    entry["details"] += [str(v) for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        detail = f"  ({'; '.join(e['details'])})" if e["details"] else ""
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if e['passed'] else 'FAIL'}  {e['title']}{detail}")
