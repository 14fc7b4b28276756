import numpy as np
import pytest

from backend.app.config.config import get_settings
from backend.app.models.fem_grid import ProblemCoefficients, build_mesh
from backend.app.models.parabolic_forward import ForwardConfig
from backend.app.models.sensing import make_uniform_sensors
from backend.app.utils.run_registry import clear_runs


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run the slow acceptance studies")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Point the default output directory at a temporary path and reset cached settings."""
    monkeypatch.setenv("HEATSRC_OUT_DIR", str(tmp_path / "results"))
    monkeypatch.setenv("HEATSRC_WORKERS", "1")
    monkeypatch.delenv("HEATSRC_DENSE_DOF_LIMIT", raising=False)
    get_settings.cache_clear()
    clear_runs()
    yield
    get_settings.cache_clear()
    clear_runs()


@pytest.fixture
def unit_coeff():
    return ProblemCoefficients()


@pytest.fixture
def coarse_fwd(unit_coeff):
    """h = 1/8, tau = 1/8: 49 dofs, 8 steps."""
    return ForwardConfig.from_step(build_mesh(1 / 8), unit_coeff, 1 / 8)


@pytest.fixture
def small_sensors():
    return make_uniform_sensors(4)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)
