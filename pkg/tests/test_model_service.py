import json

import numpy as np
import pytest

from errors import ConfigError, PreconditionError
from models import LinearDrift, StatePair
from services import model_service


def test_kinetic_fp_matrices(kinetic):
    assert (kinetic.m, kinetic.d) == (1, 1)
    np.testing.assert_array_equal(kinetic.A, [[0.0]])
    np.testing.assert_array_equal(kinetic.B, [[1.0]])
    np.testing.assert_array_equal(kinetic.sigma, [[1.0]])
    assert isinstance(kinetic.drift, LinearDrift)
    np.testing.assert_array_equal(kinetic.drift.G, [[-1.0]])
    np.testing.assert_array_equal(kinetic.drift.H, [[-1.0]])
    assert kinetic.lipschitz == (1.0, 1.0)


def test_kinetic_fp_noise_level():
    spec = model_service.build_preset("kinetic_fp", {"d": 2, "sigma": 4.0})
    np.testing.assert_array_equal(spec.sigma, 4.0 * np.eye(2))
    assert spec.sigma_min == 4.0


def test_chain_matrices(chain):
    assert (chain.m, chain.d) == (2, 1)
    np.testing.assert_array_equal(chain.A, [[-1.0, 0.5], [0.0, 0.0]])
    np.testing.assert_array_equal(chain.B, [[0.0], [1.0]])


def test_chain_rejects_zero_gamma():
    with pytest.raises(PreconditionError):
        model_service.build_preset("chain", {"k": 2, "d": 1, "gamma": 0.0})


def test_galerkin_trivial_profile():
    spec = model_service.build_preset("galerkin", {"n_modes": 4})
    assert (spec.m, spec.d) == (8, 4)
    np.testing.assert_array_equal(spec.A, np.zeros((8, 8)))
    expected_B = np.zeros((8, 4))
    expected_B[[1, 3, 5, 7], [0, 1, 2, 3]] = 1.0
    np.testing.assert_array_equal(spec.B, expected_B)
    np.testing.assert_array_equal(spec.l2, [1.0, 4.0, 9.0, 16.0])
    z = model_service.drift_batch(spec, np.ones(8), np.ones(4))
    np.testing.assert_array_equal(z, np.zeros(4))


def test_unknown_preset():
    with pytest.raises(PreconditionError):
        model_service.build_preset("underdamped")


def test_drift_eval_examples(kinetic, chain):
    assert model_service.drift_eval(kinetic, StatePair([0.0], [0.0]))[0] == 0.0
    assert model_service.drift_eval(kinetic, StatePair([2.0], [3.0]))[0] == -5.0
    assert model_service.drift_eval(chain, StatePair([1.0, 4.0], [2.0]))[0] == -6.0


def test_drift_eval_dimension_mismatch(kinetic):
    with pytest.raises(PreconditionError):
        model_service.drift_eval(kinetic, StatePair([1.0, 2.0], [0.0]))


def test_full_drift_matrix_examples(kinetic, chain):
    np.testing.assert_array_equal(model_service.full_drift_matrix(kinetic), [[0.0, 1.0], [-1.0, -1.0]])
    np.testing.assert_array_equal(
        model_service.full_drift_matrix(chain),
        [[-1.0, 0.5, 0.0], [0.0, 0.0, 1.0], [0.0, -1.0, -1.0]],
    )


@pytest.mark.parametrize("name, params", [
    ("kinetic_fp", {"d": 2}),
    ("kinetic_gradient", {"d": 2, "b_kind": "scaled_linear", "beta": 2.0}),
    ("chain", {"k": 3, "d": 2, "gamma": -0.4}),
    ("galerkin", {"n_modes": 3, "gamma": 0.5, "alpha": 0.2, "beta": 0.3}),
])
def test_full_drift_matrix_matches_dynamics(name, params):
    spec = model_service.build_preset(name, params)
    rng = np.random.default_rng(0)
    u = rng.standard_normal((100, spec.dim))
    x, y = u[:, :spec.m], u[:, spec.m:]
    expected = np.hstack([x @ spec.a_eff.T + y @ spec.B.T, model_service.effective_drift_batch(spec, x, y)])
    got = u @ model_service.full_drift_matrix(spec).T + model_service.drift_offset(spec)
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_full_drift_matrix_rejects_nonlinear():
    spec = model_service.build_preset("kinetic_gradient", {"b_kind": "log_cosh", "kappa": 0.5})
    with pytest.raises(PreconditionError):
        model_service.full_drift_matrix(spec)


@pytest.mark.parametrize("name, params", [
    ("kinetic_fp", {"d": 2}),
    ("kinetic_gradient", {"d": 2, "b_kind": "log_cosh", "beta": 1.5, "kappa": 0.7,
                          "B": [[2.0, 0.5], [0.0, 1.0]]}),
    ("chain", {"k": 2, "d": 2, "gamma": 0.5, "beta": 3.0}),
    ("galerkin", {"n_modes": 4, "gamma": 0.5, "alpha": 0.05, "beta": 0.1}),
])
def test_lipschitz_pair_holds(name, params):
    spec = model_service.build_preset(name, params)
    K1, K2 = spec.lipschitz
    rng = np.random.default_rng(1)
    u, v = 3.0 * rng.standard_normal((2, 1000, spec.dim))
    m = spec.m
    dz = model_service.drift_batch(spec, u[:, :m], u[:, m:]) - model_service.drift_batch(spec, v[:, :m], v[:, m:])
    lhs = np.linalg.norm(dz, axis=1)
    rhs = K1 * np.linalg.norm(u[:, :m] - v[:, :m], axis=1) + K2 * np.linalg.norm(u[:, m:] - v[:, m:], axis=1)
    assert np.all(lhs <= rhs + 1e-9)


@pytest.mark.parametrize("name, params", [
    ("kinetic_fp", {"d": 2, "sigma": 0.3}),
    ("kinetic_gradient", {"d": 2, "b_kind": "log_cosh", "kappa": 0.25, "A": [[0.1, 0.2], [0.3, 0.4]]}),
    ("chain", {"k": 3, "d": 1, "gamma": 0.1}),
    ("galerkin", {"n_modes": 5, "gamma": 0.5, "alpha": 0.05, "beta": 0.1}),
])
def test_config_round_trip_is_exact(name, params):
    spec = model_service.build_preset(name, params)
    parsed = model_service.from_config(json.loads(json.dumps(model_service.to_config(spec, seed=7))))
    for attr in ("A", "B", "sigma", "l1", "l2"):
        assert np.array_equal(getattr(spec, attr), getattr(parsed, attr))
    assert parsed.lipschitz == spec.lipschitz
    assert type(parsed.drift) is type(spec.drift)


def test_from_config_rejects_unknown_keys(kinetic):
    config = model_service.to_config(kinetic)
    config["colour"] = "blue"
    with pytest.raises(ConfigError):
        model_service.from_config(config)


def test_from_config_rejects_singular_sigma(kinetic):
    config = model_service.to_config(kinetic)
    config["matrices"]["sigma"] = [[0.0]]
    with pytest.raises(ConfigError):
        model_service.from_config(config)


def test_spec_is_read_only(kinetic):
    with pytest.raises(ValueError):
        kinetic.A[0, 0] = 1.0
