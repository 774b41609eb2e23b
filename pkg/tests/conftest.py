import os

import numpy as np
import pytest

from utils.grid import PowerGrid, load_grid

GRID_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "data", "grids")


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="also run the scaled acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: scaled end-to-end acceptance runs (minutes)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def grid_file(name):
    return os.path.join(GRID_DIR, f"{name}.grid")


def pair_grid(p, k, alpha=0.5):
    """Two nodes, injections (p, -p), one edge of coupling k."""
    return PowerGrid(alpha=[alpha, alpha], power=[p, -p], edges=[[0, 1]], capacity=[k], name=f"pair_{p}_{k}")


def square_grid():
    """Four-node ring used by the model tests."""
    return PowerGrid(
        alpha=np.full(4, 0.5),
        power=[1.0, -0.5, 0.5, -1.0],
        edges=[[0, 1], [1, 2], [2, 3], [3, 0]],
        capacity=[2.0, 1.5, 2.0, 1.5],
        name="square",
    )


@pytest.fixture
def two_node():
    return load_grid(grid_file("two_node"))


@pytest.fixture
def ring10():
    return load_grid(grid_file("ring10"))


@pytest.fixture
def ieee39():
    return load_grid(grid_file("ieee39"))


@pytest.fixture(scope="session")
def ieee118():
    """IEEE 118-bus case converted through pandapower; skipped when it is not installed."""
    pytest.importorskip("pandapower")
    from utils.cases import case_grid
    return case_grid("case118")


@pytest.fixture
def square():
    return square_grid()


@pytest.fixture
def cli(tmp_path, monkeypatch):
    """Runs the command line in-process with manifests going to tmp_path/runs."""
    monkeypatch.setenv("SYNCHRONY_RUN_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("SYNCHRONY_THREADS", "1")
    monkeypatch.delenv("SYNCHRONY_SEED", raising=False)
    from main import run
    return run
