import pytest

_ACCEPTANCE: dict = {}


@pytest.fixture
def verdict(request):
    """Record the measured outcome of the test's acceptance criterion."""
    number = request.node.get_closest_marker("criterion").args[0]

    def record(passed: bool, detail: str = "") -> None:
        _ACCEPTANCE[number] = (bool(passed), detail)

    return record


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call":
        return
    number = mark.args[0]
    if rep.failed:
        detail = _ACCEPTANCE.get(number, (False, ""))[1]
        if number not in _ACCEPTANCE:
            detail = f"{call.excinfo.typename}: {str(call.excinfo.value).splitlines()[0][:120]}"
        _ACCEPTANCE[number] = (False, detail)
    elif number not in _ACCEPTANCE:
        _ACCEPTANCE[number] = (True, "")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        passed, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
