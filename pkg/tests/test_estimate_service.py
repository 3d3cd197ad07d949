import numpy as np
import pytest
from scipy.linalg import expm, solve_continuous_lyapunov

from errors import NotHurwitzError, NumericalError, PreconditionError
from models import LinearDrift, StatePair, SystemSpec
from services import coupling_service, estimate_service, model_service
from services.estimate_service import observable


def brownian_spec(d=10):
    return SystemSpec(m=1, d=d, A=[[0.0]], B=np.zeros((1, d)), sigma=np.eye(d),
                      drift=LinearDrift(G=np.zeros((d, 1)), H=np.zeros((d, d)), z0=np.zeros(d)), name="brownian")


# --- Linear oracle ---

def test_stationary_covariance_kinetic(kinetic):
    np.testing.assert_allclose(estimate_service.stationary_covariance_linear(kinetic), 0.5 * np.eye(2), atol=1e-12)
    np.testing.assert_allclose(estimate_service.stationary_mean_linear(kinetic), [0.0, 0.0], atol=1e-15)


@pytest.mark.parametrize("name, params", [
    ("chain", {"k": 2, "d": 1, "gamma": 0.5}),
    ("kinetic_gradient", {"d": 2, "b_kind": "scaled_linear", "beta": 2.0, "A": [[-0.5, 0.2], [0.0, -0.1]]}),
    ("galerkin", {"n_modes": 3, "gamma": 0.5, "alpha": 0.05, "beta": 0.1}),
])
def test_stationary_covariance_matches_scipy(name, params):
    spec = model_service.build_preset(name, params)
    M = model_service.full_drift_matrix(spec)
    noise = np.zeros((spec.dim, spec.d))
    noise[spec.m:] = spec.sigma
    oracle = solve_continuous_lyapunov(M, -noise @ noise.T)
    np.testing.assert_allclose(estimate_service.stationary_covariance_linear(spec), oracle, atol=1e-10)


def test_lyapunov_degenerate_direction():
    # B = 0: X carries no noise
    spec = SystemSpec(m=1, d=1, A=[[-1.0]], B=[[0.0]], sigma=[[1.0]],
                      drift=LinearDrift(G=[[0.0]], H=[[-1.0]], z0=[0.0]))
    np.testing.assert_allclose(estimate_service.stationary_covariance_linear(spec), np.diag([0.0, 0.5]), atol=1e-12)


def test_lyapunov_rejects_non_hurwitz():
    with pytest.raises(NotHurwitzError):
        estimate_service.stationary_covariance_linear(brownian_spec())


# --- Observables ---

def test_observable_shorthand(chain):
    f = observable("coord_x_1", chain)
    assert f(np.array([[1.0, 2.0, 3.0]]))[0] == 2.0
    with pytest.raises(PreconditionError):
        observable("coord_x_5", chain)
    with pytest.raises(PreconditionError):
        observable("cubic", chain)


def test_indicator_halfspace(kinetic):
    f = observable("indicator_halfspace", kinetic, {"normal": [0.0, 1.0], "offset": 0.5})
    np.testing.assert_array_equal(f(np.array([[9.0, 0.4], [-9.0, 0.6]])), [0.0, 1.0])


# --- Ergodic averages ---

@pytest.mark.slow
def test_ergodic_covariance_kinetic(kinetic):
    reports = estimate_service.ergodic_moments(kinetic, dt=1e-3, T=200.0, burn_in=20.0, seed=1)
    mean, cov = estimate_service.as_matrix(reports, kinetic.dim)
    se = {r.name: r.stderr for r in reports}
    for i in range(2):
        for j in range(2):
            assert abs(cov[i, j] - 0.5 * (i == j)) < 5.0 * se[f"cov_{i}_{j}"] + 0.01
    assert reports[0].meta["stationary"]


def test_ergodic_flags_brownian_path():
    reports = estimate_service.ergodic_moments(brownian_spec(), dt=0.01, T=100.0, burn_in=0.0, seed=2)
    slope = reports[0].meta["stationarity_slope"]
    assert slope > 0.5
    assert not reports[0].meta["stationary"]


def test_ergodic_needs_samples(kinetic):
    with pytest.raises(PreconditionError):
        estimate_service.ergodic_moments(kinetic, dt=0.1, T=1.0, burn_in=0.5, seed=0)


# --- Exponential moments ---

def test_exp_moment_below_threshold(kinetic):
    reports, summary = estimate_service.exp_moment_curve(kinetic, eps=0.1, dt=0.01, T=20.0, n_paths=2000, seed=3)
    assert len(reports) == 20
    assert summary["gaussian_threshold"] == pytest.approx(1.0)
    assert summary["largest_safe_eps"] == 0.1
    assert not summary["diverges"] and summary["bounded"]
    final = reports[-1]
    assert final.meta["t"] == pytest.approx(20.0)
    assert abs(final.value - 1.0 / 0.9) < 5.0 * final.stderr + 0.02


def test_exp_moment_at_zero_eps_is_one(kinetic):
    reports, summary = estimate_service.exp_moment_curve(kinetic, eps=0.0, dt=0.01, T=2.0, n_paths=50, seed=3)
    assert [r.value for r in reports] == [1.0] * 20
    assert all(r.stderr == 0.0 for r in reports)
    assert summary["bounded"] and not summary["diverges"]


def test_exp_moment_above_threshold(kinetic):
    _, summary = estimate_service.exp_moment_curve(kinetic, eps=2.0, dt=0.01, T=10.0, n_paths=500, seed=3)
    assert summary["diverges"]
    assert summary["largest_safe_eps"] < 1.0


def test_exp_moment_overflow_is_reported(kinetic):
    reports, summary = estimate_service.exp_moment_curve(kinetic, eps=1000.0, dt=0.01, T=10.0, n_paths=500, seed=3)
    assert reports == []
    assert summary["overflow"] and not summary["bounded"]


# --- Semigroup and decay ---

def test_semigroup_apply_linear(kinetic):
    xi = StatePair([1.0], [0.0])
    report = estimate_service.semigroup_apply(kinetic, "coord_x", xi, 1.0, 4000, 0.01, seed=4)
    exact = (expm(model_service.full_drift_matrix(kinetic)) @ xi.as_vector())[0]
    assert abs(report.value - exact) < 4.0 * report.stderr + 0.01
    assert estimate_service.semigroup_apply(kinetic, "coord_x", xi, 0.0, 100, 0.01, seed=4).value == 1.0


def test_semigroup_apply_nested_budgets_agree(kinetic):
    xi = StatePair([1.0], [0.0])
    small = estimate_service.semigroup_apply(kinetic, "coord_x", xi, 1.0, 1000, 0.01, seed=5)
    large = estimate_service.semigroup_apply(kinetic, "coord_x", xi, 1.0, 4000, 0.01, seed=5)
    assert large.stderr < small.stderr
    assert abs(small.value - large.value) <= 3.0 * np.hypot(small.stderr, large.stderr)


def test_semigroup_needs_inner_paths(kinetic):
    with pytest.raises(PreconditionError):
        estimate_service.semigroup_apply(kinetic, "coord_x", StatePair([0.0], [0.0]), 1.0, 10, 0.01, seed=0)


@pytest.mark.slow
def test_variance_decay_rate_kinetic(kinetic):
    t_grid = [1.2 + 0.4 * j for j in range(10)]
    report = estimate_service.decay_fit(kinetic, "coord_x", t_grid, outer_n=400, inner_n=500, dt=0.01, seed=5)
    S = estimate_service.stationary_covariance_linear(kinetic)
    M = model_service.full_drift_matrix(kinetic)
    oracle = []
    for t in t_grid:
        c = expm(t * M.T)[:, 0]
        oracle.append(c @ S @ c)
    oracle_rate = -np.polyfit(t_grid, np.log(oracle), 1)[0]
    assert report.value == pytest.approx(oracle_rate, abs=0.25)


def test_entropy_decreases_kinetic(kinetic):
    report = estimate_service.decay_fit(
        kinetic, "indicator_halfspace", [0.5, 1.0, 1.5, 2.0], outer_n=4000, inner_n=100, dt=0.01, seed=6,
        mode="entropy", burn_in=10.0, sampler="parallel", bins=16,
    )
    values = report.meta["values"]
    assert values[0] > values[-1]
    assert report.value > 0


def test_entropy_mode_limits_dimension(chain):
    with pytest.raises(PreconditionError):
        estimate_service.decay_fit(chain, "indicator_halfspace", [0.5, 1.0], outer_n=100, inner_n=100, dt=0.01,
                                   seed=0, mode="entropy", burn_in=1.0, sampler="parallel")


def test_variance_decay_rejects_constant_f(kinetic):
    with pytest.raises(PreconditionError):
        estimate_service.decay_fit(kinetic, "indicator_halfspace", [0.5, 1.0], outer_n=50, inner_n=100, dt=0.01,
                                   seed=0, burn_in=1.0, sampler="parallel",
                                   f_params={"normal": [1.0, 0.0], "offset": 1e6})


def test_decay_needs_increasing_grid(kinetic):
    with pytest.raises(PreconditionError):
        estimate_service.decay_fit(kinetic, "coord_x", [1.0, 0.5], outer_n=10, inner_n=100, dt=0.01, seed=0)


def test_non_positive_estimates_raise(kinetic, monkeypatch):
    monkeypatch.setattr(estimate_service, "_variance_curve", lambda *args, **kwargs: np.array([0.1, -0.1]))
    with pytest.raises(NumericalError):
        estimate_service.decay_fit(kinetic, "coord_x", [0.5, 1.0], outer_n=10, inner_n=100, dt=0.01, seed=0,
                                   burn_in=1.0, thin=10)


# --- Harnack ---

def test_harnack_constant_matches_deterministic_weight():
    spec = model_service.build_preset("kinetic_fp", {"d": 1, "sigma": 4.0})
    xi, eta = StatePair([0.0], [0.0]), StatePair([0.0], [1.0])
    reports, chain = estimate_service.harnack_audit(spec, "bounded_tanh", xi, eta, 1.0, 20000, 0.01, seed=7)
    by_name = {r.name: r for r in reports}
    # linear drift: psi is deterministic, so log E R^2 = sum |psi / sigma|^2 dt exactly
    transcript = coupling_service.simulate_control_coupling(spec, xi, eta, 1.0, 0.01, seed=7)
    exact = float(np.sum(transcript.psi ** 2) * 0.01 / 16.0)
    assert exact == pytest.approx(3.0 / 16.0, abs=0.02)
    assert by_name["c0"].value == pytest.approx(exact, abs=0.04)
    assert chain.holds


def test_harnack_needs_bounded_observable(kinetic):
    with pytest.raises(PreconditionError):
        estimate_service.harnack_audit(kinetic, "coord_x", StatePair([0.0], [0.0]), StatePair([1.0], [0.0]),
                                       1.0, 100, 0.01, seed=0)


def test_harnack_constant_fit_is_stable():
    spec = model_service.build_preset("kinetic_fp", {"d": 1, "sigma": 4.0})
    reports, summary = estimate_service.harnack_constant_fit(
        spec, "bounded_tanh", StatePair([0.0], [0.0]), [0.0, 1.0], [0.5, 1.0], 1.0, 20000, 0.01, seed=8)
    assert len(reports) == 8
    assert summary["chains_hold"]
    assert summary["stable"] and summary["ratio"] < 2.0


@pytest.mark.parametrize("direction", [[1.0, 0.0], [0.0, 1.0]])
def test_harnack_linear_weight_is_exact_at_large_gaps(kinetic, direction):
    gaps = [0.25, 0.5, 1.0, 2.0]
    reports, summary = estimate_service.harnack_constant_fit(
        kinetic, "bounded_tanh", StatePair([0.0], [0.0]), direction, gaps, 1.0, 2000, 0.01, seed=9)
    c0 = [r for r in reports if r.name == "c0"]
    assert len(c0) == 4
    assert all(np.isfinite(r.value) and r.meta["R2_method"] == "exact" for r in c0)
    # psi is linear in the gap, so c0 does not depend on it
    assert max(r.value for r in c0) == pytest.approx(min(r.value for r in c0), rel=1e-9)
    assert summary["stable"] and summary["chains_hold"]
    transcript = coupling_service.simulate_control_coupling(
        kinetic, StatePair([0.0], [0.0]), StatePair.from_vector(np.array(direction), 1), 1.0, 0.01, seed=9)
    assert c0[2].value == pytest.approx(float(np.sum(transcript.psi ** 2) * 0.01), rel=1e-9)


def test_harnack_x_gap_constant_exceeds_y_gap(kinetic):
    xi = StatePair([0.0], [0.0])
    x_gap, _ = estimate_service.harnack_audit(kinetic, "bounded_tanh", xi, StatePair([1.0], [0.0]), 1.0, 500, 0.01, 1)
    y_gap, _ = estimate_service.harnack_audit(kinetic, "bounded_tanh", xi, StatePair([0.0], [1.0]), 1.0, 500, 0.01, 1)
    assert x_gap[3].value > 2.0 * y_gap[3].value
