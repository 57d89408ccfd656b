import pytest

from app.solver import SolverOptions, StoppingRule


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run full-scale reproductions")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def quick_stop():
    return StoppingRule(max_iters=20000, eps_feas=1e-6, eps_rel=1e-7, window=100)


@pytest.fixture
def psi_options(quick_stop):
    return SolverOptions(path="psi_path", stop=quick_stop)


@pytest.fixture
def phi_options(quick_stop):
    return SolverOptions(path="phi_path", stop=quick_stop)
