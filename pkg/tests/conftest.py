import numpy as np
import pytest

from dosewise.config import default_config
from dosewise.model import THETA0_DEFAULT, X0_DEFAULT, LeukemiaModel


@pytest.fixture(scope="session")
def app_config():
    return default_config()


@pytest.fixture(scope="session")
def calibrated_model(app_config) -> LeukemiaModel:
    return app_config.model()


@pytest.fixture(scope="session")
def x0():
    return X0_DEFAULT.copy()


@pytest.fixture(scope="session")
def theta0():
    return THETA0_DEFAULT.copy()


@pytest.fixture()
def rng():
    return np.random.default_rng(20240611)
