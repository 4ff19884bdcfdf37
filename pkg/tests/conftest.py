import numpy as np
import pytest

from fmu import ndtensor as nt


@pytest.fixture
def f64():
    with nt.precision(np.float64):
        yield


@pytest.fixture(autouse=True)
def _clean_tape():
    nt.get_tape().clear()
    yield
    nt.get_tape().clear()


# acceptance criteria: one summary line each, whatever the pytest verbosity
_CRITERIA: dict[int, tuple[bool, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or (rep.when == "setup" and rep.failed)):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    _CRITERIA[number] = (rep.passed, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
