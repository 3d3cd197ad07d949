# tests/conftest.py
import json

import pytest

from models import LinearDrift, SystemSpec
from server import create_app
from services import model_service


@pytest.fixture
def app():
    return create_app({"TESTING": True})


@pytest.fixture
def runner(app):
    return app.test_cli_runner()


@pytest.fixture
def kinetic():
    return model_service.build_preset("kinetic_fp", {"d": 1})


@pytest.fixture
def chain():
    return model_service.build_preset("chain", {"k": 2, "d": 1, "gamma": 0.5})


@pytest.fixture
def galerkin_profile():
    """N = 8, lambda_i = i^2, gamma = 0.5, alpha = 0.05, beta = 0.1."""
    return model_service.build_preset("galerkin", {"gamma": 0.5, "alpha": 0.05, "beta": 0.1})


@pytest.fixture
def repulsive():
    """Z(x, y) = +x with A = 0, B = 1."""
    return SystemSpec(m=1, d=1, A=[[0.0]], B=[[1.0]], sigma=[[1.0]],
                      drift=LinearDrift(G=[[1.0]], H=[[0.0]], z0=[0.0]), name="repulsive")


@pytest.fixture
def write_config(tmp_path):
    """Write an experiment file and return its path."""
    def _write(data, name="run.json"):
        path = tmp_path / name
        path.write_text(json.dumps(data))
        return str(path)
    return _write
