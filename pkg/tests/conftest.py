import numpy as np
import pytest
import torch

from biomass3d.numerics import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (report.when == "call" or report.failed):
        return
    number, title = mark.args
    details = [value for key, value in item.user_properties if key == "detail"]
    item.config.stash.setdefault(_CRITERIA, {})[number] = (title, report.outcome, details)


_CRITERIA = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_CRITERIA, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, outcome, details = results[number]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        suffix = f" ({'; '.join(details)})" if details else ""
        terminalreporter.write_line(f"criterion {number} {verdict}: {title}{suffix}")
