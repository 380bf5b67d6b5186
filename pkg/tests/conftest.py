import pytest

_ACCEPTANCE: dict[str, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    name = marker.args[0]
    detail = getattr(item, "acceptance_detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else ""
    _ACCEPTANCE[name] = ("PASS" if rep.passed else "FAIL", detail)


@pytest.fixture
def report(request):
    """Attach a one-line measurement to the acceptance summary."""

    def note(text: str) -> None:
        request.node.acceptance_detail = text
        print(text)

    return note


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (status, detail) in _ACCEPTANCE.items():
        terminalreporter.write_line(f"{status} {name}" + (f": {detail}" if detail else ""))
