import numpy as np
import pytest

from lwahand.config import toy_config
from lwahand.losses import synthetic_regressor
from lwahand.mesh import synthesize_topology
from lwahand.model import Model


@pytest.fixture(scope="session")
def hierarchy():
    return synthesize_topology(0)


@pytest.fixture(scope="session")
def regressor(hierarchy):
    return synthetic_regressor(hierarchy.template)


@pytest.fixture
def toy_model(hierarchy):
    return Model.create(toy_config(), seed=0, hierarchy=hierarchy)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the terminal summary prints them all together."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(name, ok, detail=""):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
