import numpy as np
import pytest

from errors import PreconditionError
from models import FiniteMarkovOperator
from services import operator_service
from services.operator_service import bound_integrand, entropy, lp_norm


def two_state(a):
    return FiniteMarkovOperator(P=[[1.0 - a, a], [a, 1.0 - a]], mu=[0.5, 0.5])


IDENTITY = FiniteMarkovOperator(P=np.eye(2), mu=[0.5, 0.5])


def test_two_state_report():
    report = operator_service.norm_report(two_state(0.3))
    assert report.norm_2_gap == pytest.approx(0.4, abs=1e-12)
    assert report.delta == pytest.approx(1.0, abs=1e-8)
    assert report.bound == pytest.approx(1.0 / 3.0, abs=1e-6)
    assert report.n_power == 1
    assert report.norm_2_gap ** 2 <= report.bound


def test_hypercontractive_power_two_state():
    # second eigenvalue 0.9: P^n is a 2->4 contraction once 0.9^n <= 1/sqrt(3)
    n_power, norm = operator_service.hypercontractive_power(two_state(0.05), n_max=20)
    assert n_power == 6
    assert norm <= 1.0 + 1e-9


def test_identity_has_delta_two():
    assert operator_service.norm_2_to_4(IDENTITY) ** 4 == pytest.approx(2.0, abs=1e-9)
    with pytest.raises(PreconditionError):
        operator_service.hypercontractive_power(IDENTITY, n_max=5)
    report = operator_service.norm_report(IDENTITY)
    assert report.bound is None and report.n_power is None
    assert report.norm_2_gap == pytest.approx(1.0, abs=1e-12)


def test_prop_p_bound_values():
    assert operator_service.prop_p_bound(1.0) == pytest.approx(1.0 / 3.0, abs=1e-6)
    assert operator_service.prop_p_bound(1.99) == pytest.approx(0.995, abs=0.005)
    assert operator_service.prop_p_bound(0.0) == 0.0
    with pytest.raises(PreconditionError):
        operator_service.prop_p_bound(2.0)


def test_bound_integrand_matches_direct_form():
    eps = np.linspace(0.05, 0.95, 19)
    for delta in (0.5, 1.0, 1.5):
        direct = (np.sqrt(8.0 * eps ** 2 + delta) - 3.0 * eps) / (1.0 - eps)
        np.testing.assert_allclose(bound_integrand(eps, delta), direct, rtol=1e-10)


def test_lp_norm_and_entropy():
    mu = np.array([0.5, 0.5])
    assert lp_norm(np.array([[1.0, 1.0]]), mu, 3.0)[0] == pytest.approx(1.0)
    assert lp_norm(np.array([[2.0, 0.0]]), mu, 2.0)[0] == pytest.approx(np.sqrt(2.0))
    assert entropy(np.array([[1.0, 1.0]]), mu)[0] == 0.0
    assert entropy(np.array([[2.0, 0.0]]), mu)[0] == pytest.approx(np.log(2.0))


@pytest.mark.parametrize("index", range(5))
def test_random_chain_is_reversible_and_valid(index):
    op = operator_service.random_reversible_chain(6, seed=3, index=index)
    assert operator_service.validate_operator(op).holds
    flux = op.mu[:, None] * op.P
    np.testing.assert_allclose(flux, flux.T, atol=1e-14)
    second = np.sort(np.abs(np.linalg.eigvals(op.P)))[-2]
    assert operator_service.norm2_gap(op) == pytest.approx(second, abs=1e-10)


def test_random_chain_needs_two_states():
    with pytest.raises(PreconditionError):
        operator_service.random_reversible_chain(1, seed=0)


def test_invalid_operator_is_rejected():
    op = FiniteMarkovOperator(P=[[0.5, 0.6], [0.5, 0.5]], mu=[0.5, 0.5])
    report = operator_service.validate_operator(op)
    assert not report.holds and report.witnesses["row_sum_violation"] == pytest.approx(0.1)
    with pytest.raises(PreconditionError):
        operator_service.norm2_gap(op)
    with pytest.raises(PreconditionError):
        FiniteMarkovOperator(P=[[1.0, 0.0]], mu=[1.0])


def test_report_is_permutation_invariant():
    op = operator_service.random_reversible_chain(4, seed=11)
    order = np.array([2, 0, 3, 1])
    a = operator_service.norm_report(op)
    b = operator_service.norm_report(op.permuted(order))
    assert b.norm_2_gap == pytest.approx(a.norm_2_gap, abs=1e-12)
    assert b.delta == pytest.approx(a.delta, rel=1e-4)


def test_entropy_contraction_two_state():
    report = operator_service.entropy_contraction_audit(two_state(0.3), 2.0, 4.0, trials=500, seed=1)
    assert report.holds
    assert report.witnesses["factor"] == pytest.approx(2.0 / 3.0)
    assert report.witnesses["violations"] == 0
    assert report.witnesses["norm_pq"] == pytest.approx(1.0, abs=1e-8)


def test_entropy_contraction_needs_norm_one():
    with pytest.raises(PreconditionError):
        operator_service.entropy_contraction_audit(two_state(0.05), 2.0, 4.0, trials=10, seed=1)
    with pytest.raises(PreconditionError):
        operator_service.entropy_contraction_audit(two_state(0.3), 4.0, 2.0, trials=10, seed=1)


RANK_ONE = FiniteMarkovOperator(P=np.tile([0.2, 0.3, 0.5], (3, 1)), mu=[0.2, 0.3, 0.5])


def test_rank_one_norm_is_one():
    assert operator_service.validate_operator(RANK_ONE).holds
    assert operator_service.norm_2_to_4(RANK_ONE) == pytest.approx(1.0, abs=1e-9)
    assert operator_service.norm2_gap(RANK_ONE) == pytest.approx(0.0, abs=1e-12)


def test_identity_is_valid():
    report = operator_service.validate_operator(IDENTITY)
    assert report.holds
    assert report.witnesses["row_sum_violation"] == 0.0 and report.witnesses["min_mu"] == 0.5


@pytest.mark.parametrize("n", [3, 4, 5])
@pytest.mark.parametrize("index", range(4))
def test_norm_dominates_sampled_ratios(n, index):
    op = operator_service.random_reversible_chain(n, seed=1, index=index)
    g = np.random.default_rng(index).standard_normal((20000, n))
    # directions near the constants are where a stalled search stops
    f = np.vstack([g, 1.0 + 0.3 * g, 1.0 + 0.05 * g])
    sampled = (np.abs(f @ op.P.T) ** 4 @ op.mu) / lp_norm(f, op.mu, 2.0) ** 4
    assert operator_service.norm_2_to_4(op) ** 4 >= sampled.max() - 1e-9


@pytest.mark.slow
def test_gap_bound_on_random_chains():
    checked = 0
    for index in range(200):
        op = operator_service.random_reversible_chain(2 + index % 5, seed=1, index=index)
        delta = operator_service.norm_2_to_4(op) ** 4
        if delta >= 2.0:
            continue
        gap = operator_service.norm2_gap(op)
        assert gap ** 2 <= operator_service.prop_p_bound(delta) + 1e-9, index
        checked += 1
    assert checked > 50
