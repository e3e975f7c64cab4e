import numpy as np
import pytest

from condprune.driver import TrainConfig, train
from condprune.fixtures import FixtureSpec, fixture_redundant_model

FIXTURE_SEED = 7
TRAIN_SEED = 0

_criteria: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if rep.when == "teardown":
        return
    # fixtures that build the inputs count toward the criterion's time
    spent = _criteria.get(number, (title, "", 0.0))[2] + rep.duration
    if rep.when == "call" or rep.outcome != "passed":
        status = "PASS" if rep.passed else ("SKIP" if rep.skipped else "FAIL")
    else:
        status = "PENDING"
    _criteria[number] = (title, status, spent)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, status, duration = _criteria[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title} ({duration:.1f}s)")


@pytest.fixture(scope="session")
def fixture_model():
    """The default redundant fixture: three prunable convolutions and a fixed head."""
    return fixture_redundant_model(FixtureSpec(seed=FIXTURE_SEED))


@pytest.fixture(scope="session")
def trained_policy(fixture_model):
    graph, dataset = fixture_model
    history = []
    theta = train(graph, dataset, TrainConfig(seed=TRAIN_SEED), log=history.append)
    return theta, history


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
