import numpy as np
import pytest

# criterion number -> {"title": str, "outcomes": [bool], "details": [str]}
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by the test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report(request):
    """Attach a measured value to the criterion line printed in the summary."""
    mark = request.node.get_closest_marker("criterion")

    def add(text):
        _CRITERIA.setdefault(mark.args[0], {"title": mark.args[1], "outcomes": [], "details": []})["details"].append(text)

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    entry = _CRITERIA.setdefault(mark.args[0], {"title": mark.args[1], "outcomes": [], "details": []})
    entry["outcomes"].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        e = _CRITERIA[n]
        status = "PASS" if e["outcomes"] and all(e["outcomes"]) else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {n:>2} {status}  {e['title']}" + (f"  [{detail}]" if detail else ""))
