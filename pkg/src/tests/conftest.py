# tests/conftest.py
import numpy as np
import pytest

from src.config.settings import Settings
from src.stiv.cone_solver import SolverConfig
from src.stiv.data_model import Dataset


@pytest.fixture
def test_settings():
    """Fixture for test settings."""
    return Settings(
        log_level="DEBUG",
        output_dir="./test_reports",
        max_workers=1,
        zero_clip=1e-6,
        lp_backend="native",
        block_limit=8,
    )


@pytest.fixture
def solver_cfg():
    return SolverConfig()


def make_iv_dataset(n=200, seed=0, beta=(1.0, 0.5), rho=0.5, strength=1.0, zbar_theta=()):
    """One endogenous regressor x0, one exogenous x1 repeated as an instrument, constant first."""
    rng = np.random.default_rng(seed)
    z1, z2, w = rng.standard_normal((3, n))
    u = rng.standard_normal(n) * 0.5
    v = rho * u + np.sqrt(1.0 - rho ** 2) * rng.standard_normal(n) * 0.5
    x0 = strength * (z1 + z2) + v
    x = np.column_stack([x0, w])
    z = np.column_stack([np.ones(n), z1, z2, w])
    y = x @ np.asarray(beta) + u
    zbar = None
    if zbar_theta:
        zbar = rng.standard_normal((n, len(zbar_theta))) + np.outer(u, zbar_theta) / 0.25
    return Dataset(y=y, x=x, z=z, zbar=zbar, const_instr_idx=0, exo_idx=(1,))


@pytest.fixture
def iv_dataset():
    return make_iv_dataset()


@pytest.fixture
def exogenous_dataset():
    """Z = X with a constant regressor: the square-root Lasso setting."""
    rng = np.random.default_rng(5)
    n = 120
    x = np.column_stack([np.ones(n), rng.standard_normal((n, 4))])
    y = x @ np.array([0.0, 2.0, 0.0, -1.0, 0.0]) + 0.3 * rng.standard_normal(n)
    return Dataset(y=y, x=x, z=x.copy(), const_instr_idx=0, exo_idx=tuple(range(5)))


@pytest.fixture
def small_psi():
    rng = np.random.default_rng(11)
    return rng.standard_normal((4, 3))
