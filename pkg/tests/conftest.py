import re

import pytest

from gfg import modelfile

_CRITERION = re.compile(r"test_criterion_(\d+)_(\w+)")
_results: dict = {}


@pytest.fixture(scope="session")
def models():
    return {name: modelfile.load(name) for name in modelfile.bundled_models()}


def pytest_runtest_logreport(report):
    m = _CRITERION.search(report.nodeid)
    if not m:
        return
    key = (int(m.group(1)), m.group(2).replace("_", " "))
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed:
        _results[key] = "FAIL"
    elif report.when == "call":
        _results.setdefault(key, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for (n, title), outcome in sorted(_results.items()):
        terminalreporter.write_line(f"{outcome} criterion {n:2d}: {title}")
