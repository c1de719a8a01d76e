import numpy as np
import pytest

from recruitenc import corpus


@pytest.fixture(scope="session")
def small_corpus():
    return corpus.generate_synthetic_corpus(200, vocab_size=120, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if rep.when == "call" or rep.failed:
        n, title = mark.args
        prev = _criteria.get(n, (title, True))
        _criteria[n] = (title, prev[1] and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        title, ok = _criteria[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {title}")
