import pytest

_CRITERIA = {}


class Criterion:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.detail = ""


@pytest.fixture
def criterion(request):
    """Register an acceptance criterion; its outcome is reported in the terminal summary."""

    def make(number, title):
        c = Criterion(number, title)
        _CRITERIA[request.node.nodeid] = [c, None]
        return c

    return make


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    entry = _CRITERIA.get(item.nodeid)
    if entry is not None and rep.when == "call":
        entry[1] = rep.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for c, ok in sorted(_CRITERIA.values(), key=lambda e: e[0].number):
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {c.number:2d}: {c.title} | {c.detail}")
