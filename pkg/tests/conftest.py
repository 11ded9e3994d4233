import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, derandomize=True, print_blob=True)
settings.load_profile("repo")

# acceptance outcome per criterion number: (title, passed, details)
_RESULTS: dict = {}
_DETAILS: dict = {}


@pytest.fixture
def measured(request):
    """Lets an acceptance test attach its measured values to the summary line."""
    def note(text: str) -> None:
        _DETAILS[request.node.nodeid] = text
    return note


def _criterion(item):
    mark = item.get_closest_marker("criterion")
    return None if mark is None else (mark.args[0], mark.args[1])


def pytest_collection_modifyitems(items):
    for item in items:
        crit = _criterion(item)
        if crit is not None:
            item.user_properties.append(("criterion", crit))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    number, title = crit
    failed = report.failed or report.skipped and report.when != "teardown"
    if report.when == "call" or failed:
        _, ok, details = _RESULTS.get(number, (title, True, []))
        if report.nodeid in _DETAILS:
            details.append(_DETAILS.pop(report.nodeid))
        _RESULTS[number] = (title, ok and not failed, details)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, details = _RESULTS[number]
        line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{'; '.join(details)}]" if details else ""))
