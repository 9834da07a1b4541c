"""Per-criterion pass/fail summary for the acceptance suite.

Tests tagged ``@pytest.mark.criterion(n, "name")`` are grouped by ``n``; a
criterion passes when all its tests pass. Extra lines added through the
``acceptance_log`` fixture are printed after the summary.
"""
import pytest

_CRITERIA = {}   # n -> name
_ITEMS = {}      # nodeid -> n
_FAILED = set()
_SEEN = set()
_LOG = []


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            n, name = m.args
            _CRITERIA[n] = name
            _ITEMS[item.nodeid] = n


def pytest_runtest_logreport(report):
    n = _ITEMS.get(report.nodeid)
    if n is None:
        return
    _SEEN.add(n)
    if report.failed or (report.when == "call" and report.skipped):
        _FAILED.add(n)


def pytest_terminal_summary(terminalreporter):
    if not _SEEN:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_SEEN):
        tr.write_line(f"criterion {n} {_CRITERIA[n]}: {'FAIL' if n in _FAILED else 'PASS'}")
    if _LOG:
        tr.write_line("")
        for line in _LOG:
            tr.write_line(line)


@pytest.fixture(scope="session")
def acceptance_log():
    return _LOG.append
