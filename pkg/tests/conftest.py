import pytest

from dstack_sim.walkthrough import run_walkthrough

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


def pytest_runtest_logreport(report):
    item_marker = getattr(report, "criterion", None)
    if item_marker is None:
        return
    number, title = item_marker
    entry = _criteria.setdefault(number, {"title": title, "passed": True, "seen": False})
    if report.when == "call" or report.outcome != "passed":
        entry["seen"] = True
        if report.outcome != "passed":
            entry["passed"] = False


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["passed"] and entry["seen"] else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}  {entry['title']}")


@pytest.fixture
def deployed():
    """A fully deployed system (walkthrough seed 42) and its live handles."""
    keep: dict = {}
    report = run_walkthrough(42, keep=keep)
    assert report["ok"], report
    return keep["run"]
