# services/operator_service.py
"""
Exact checks on finite-state Markov operators: L2 gap, p->q operator norms,
the gap bound obtained from the 2->4 norm, entropy contraction and the
hypercontractive power.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.linalg import svdvals
from scipy.optimize import minimize, minimize_scalar

from errors import PreconditionError
from models import ConditionReport, FiniteMarkovOperator, NormReport
from utils.rng import RESTARTS, TRIALS, stream

logger = logging.getLogger(__name__)

VALID_TOL = 1e-12
NORM_TOL = 1e-9
RANDOM_RESTARTS = 64
ASCENT_TOL = 1e-11
ASCENT_MAX_ITER = 10_000
ASCENT_PATIENCE = 25
CONSTANT_STARTS = 8
CONSTANT_KICK = 0.1
POLISH_STARTS = 8
POLISH_GTOL = 1e-12
POLISH_MAX_ITER = 2_000
SCAN_POINTS = 100_000
BOUND_GRID_POINTS = 10_000
ENTROPY_FLOOR = 1e-12
AUDIT_SLACK = 1e-9


def lp_norm(f: np.ndarray, mu: np.ndarray, p: float) -> np.ndarray:
    """L^p(mu) norms of the rows of `f`."""
    return np.power(np.abs(f) ** p @ mu, 1.0 / p)


def entropy(g: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """mu(g log g) row-wise, with 0 log 0 = 0 and a floor before the logarithm."""
    g = np.maximum(g, 0.0)
    return (g * np.log(np.maximum(g, ENTROPY_FLOOR))) @ mu


def bound_integrand(eps: np.ndarray, delta: float) -> np.ndarray:
    """
    (sqrt(8 eps^2 + delta) - 3 eps) / (1 - eps), written without the
    cancellation in the numerator.
    """
    eps = np.asarray(eps, dtype=float)
    return (delta - eps ** 2) / ((1.0 - eps) * (np.sqrt(8.0 * eps ** 2 + delta) + 3.0 * eps))


class OperatorService:
    """
    Desk-scale verification of the abstract operator inequalities.
    """

    # --- Construction and validation ---

    @staticmethod
    def stationary(P: np.ndarray) -> np.ndarray:
        """Invariant distribution from the left eigenvector for eigenvalue 1."""
        values, vectors = np.linalg.eig(np.asarray(P, dtype=float).T)
        v = np.real(vectors[:, np.argmin(np.abs(values - 1.0))])
        return v / v.sum()

    @staticmethod
    def random_reversible_chain(n: int, seed: int, index: int = 0) -> FiniteMarkovOperator:
        """P_ij = W_ij / W_i. for a random symmetric positive W; mu_i = W_i. / W.."""
        if n < 2:
            raise PreconditionError(f"a chain needs at least 2 states, got {n}")
        rng = stream(seed, index, TRIALS)
        W = rng.exponential(size=(n, n))
        W = W + W.T + np.diag(rng.exponential(scale=rng.uniform(0.0, 2.0 * n), size=n))
        rows = W.sum(axis=1)
        return FiniteMarkovOperator(P=W / rows[:, None], mu=rows / rows.sum())

    def validate_operator(self, op: FiniteMarkovOperator) -> ConditionReport:
        P, mu = op.P, op.mu
        row = float(np.abs(P.sum(axis=1) - 1.0).max())
        invariance = float(np.abs(mu @ P - mu).max())
        mass = abs(float(mu.sum()) - 1.0)
        negative = float(max(-P.min(), 0.0))
        holds = (row <= VALID_TOL and invariance <= VALID_TOL and mass <= VALID_TOL
                 and mu.min() > 0 and negative == 0.0)
        return ConditionReport("operator_valid", bool(holds), {
            "row_sum_violation": row,
            "invariance_violation": invariance,
            "mass_violation": mass,
            "min_mu": float(mu.min()),
            "negative_entry": negative,
        })

    def _require_valid(self, op: FiniteMarkovOperator) -> None:
        report = self.validate_operator(op)
        if not report.holds:
            raise PreconditionError(f"invalid Markov operator: {report.witnesses}")

    # --- Norms ---

    def norm2_gap(self, op: FiniteMarkovOperator) -> float:
        """|P - mu|_2 as the top singular value of D^{1/2} (P - 1 mu^T) D^{-1/2}."""
        if np.any(op.mu <= 0):
            raise PreconditionError("mu has a zero entry")
        self._require_valid(op)
        root = np.sqrt(op.mu)
        centered = op.P - np.outer(np.ones(op.n), op.mu)
        return float(svdvals(root[:, None] * centered / root[None, :])[0])

    def norm_p_to_q(self, op: FiniteMarkovOperator, p: float, q: float, seed: int = 0,
                    restarts: int = RANDOM_RESTARTS) -> Tuple[float, bool]:
        """
        |P|_{L^p(mu) -> L^q(mu)} by projected ascent on the L^p sphere along the
        L^2(mu) gradient, from random, single-atom, constant and perturbed-constant
        starts advanced together. The best starts are then polished with BFGS on
        the scale-free ratio |Pv|_q / |v|_p. Returns (value, converged); for
        n = 2 an exact angle scan is folded in.
        """
        if p < 1 or q < 1:
            raise PreconditionError(f"need p, q >= 1, got p={p}, q={q}")
        P, mu, n = op.P, op.mu, op.n
        starts = [stream(seed, i, RESTARTS).standard_normal(n) for i in range(restarts)]
        starts.extend(np.eye(n)[i] / mu[i] ** (1.0 / p) for i in range(n))
        starts.append(np.ones(n))
        kicks = stream(seed, restarts, RESTARTS)
        starts.extend(1.0 + CONSTANT_KICK * kicks.standard_normal(n) for _ in range(CONSTANT_STARTS))
        f = np.array(starts)
        f /= lp_norm(f, mu, p)[:, None]

        def objective(g: np.ndarray) -> np.ndarray:
            return np.abs(g @ P.T) ** q @ mu

        value = objective(f)
        step = np.ones(f.shape[0])
        stalled = np.zeros(f.shape[0], dtype=int)
        active = np.ones(f.shape[0], dtype=bool)
        for _ in range(ASCENT_MAX_ITER):
            if not active.any():
                break
            idx = np.flatnonzero(active)
            Pf = f[idx] @ P.T
            grad = ((q * np.abs(Pf) ** (q - 1) * np.sign(Pf) * mu) @ P) / mu
            trial = f[idx] + step[idx, None] * grad
            trial /= lp_norm(trial, mu, p)[:, None]
            new = objective(trial)
            old = value[idx]
            better = new > old
            f[idx[better]] = trial[better]
            value[idx[better]] = new[better]
            step[idx[better]] *= 2.0
            step[idx[~better]] *= 0.5
            slow = ~better | (new - old <= ASCENT_TOL * np.maximum(old, 1.0))
            stalled[idx] = np.where(slow, stalled[idx] + 1, 0)
            settled = (stalled[idx] >= ASCENT_PATIENCE) | (step[idx] < 1e-16)
            active[idx[settled]] = False
        converged = not active.any()
        best = float(value.max())

        def negative_log_ratio(v: np.ndarray) -> Tuple[float, np.ndarray]:
            Pv = P @ v
            top = np.abs(Pv) ** q @ mu
            bottom = np.abs(v) ** p @ mu
            grad = (P.T @ (mu * np.abs(Pv) ** (q - 1) * np.sign(Pv))) / top \
                - mu * np.abs(v) ** (p - 1) * np.sign(v) / bottom
            return -(np.log(top) / q - np.log(bottom) / p), -grad

        for i in np.argsort(value)[::-1][:POLISH_STARTS]:
            result = minimize(negative_log_ratio, f[i], jac=True, method="BFGS",
                              options={"gtol": POLISH_GTOL, "maxiter": POLISH_MAX_ITER})
            if not np.all(np.isfinite(result.x)):
                continue
            polished = result.x / lp_norm(result.x[None, :], mu, p)[0]
            candidate = float(objective(polished[None, :])[0])
            if np.isfinite(candidate) and candidate > best:
                best = candidate

        if n == 2:
            theta = np.linspace(0.0, 2.0 * np.pi, SCAN_POINTS, endpoint=False)
            ring = np.column_stack([np.cos(theta), np.sin(theta)])
            ring /= lp_norm(ring, mu, p)[:, None]
            scan = float(objective(ring).max())
            if scan > best * (1.0 + 1e-9):
                logger.warning(f"angle scan beat the optimizer: {scan:.12g} > {best:.12g}")
            best = max(best, scan)
        if not converged:
            logger.warning(f"p->q ascent hit the iteration cap ({ASCENT_MAX_ITER}); returning best found")
        return best ** (1.0 / q), converged

    def norm_2_to_4(self, op: FiniteMarkovOperator, seed: int = 0) -> float:
        self._require_valid(op)
        value, _ = self.norm_p_to_q(op, 2.0, 4.0, seed)
        return value

    # --- Gap bound ---

    @staticmethod
    def prop_p_bound(delta: float) -> float:
        """inf over eps in (0, 1) of (sqrt(8 eps^2 + delta) - 3 eps)/(1 - eps), clamped at 0."""
        if not 0.0 <= delta < 2.0:
            raise PreconditionError(f"delta must lie in [0, 2), got {delta}")
        upper = 1.0 - 1e-12
        result = minimize_scalar(lambda e: float(bound_integrand(e, delta)), bounds=(0.0, upper),
                                 method="bounded", options={"xatol": 1e-12})
        grid = np.linspace(0.0, upper, BOUND_GRID_POINTS)
        with np.errstate(divide="ignore", invalid="ignore"):
            grid_values = bound_integrand(grid, delta)
        best = min(float(result.fun), float(np.nanmin(grid_values)))
        return max(best, 0.0)

    # --- Entropy contraction ---

    def entropy_contraction_audit(self, op: FiniteMarkovOperator, p: float, q: float, trials: int,
                                  seed: int) -> ConditionReport:
        """
        mu((Pf) log Pf) <= c mu(f log f) for random densities f and
        mu((Pf - mu f)^2) <= c mu((f - mu f)^2) for random signed f,
        with c = (p - 1) q / (p (q - 1)).
        """
        if not q > p > 1:
            raise PreconditionError(f"need q > p > 1, got p={p}, q={q}")
        self._require_valid(op)
        norm_pq, _ = self.norm_p_to_q(op, p, q, seed)
        if norm_pq > 1.0 + NORM_TOL:
            logger.error(f"|P|_{{{p}->{q}}} = {norm_pq:.12g} > 1; refusing to audit")
            raise PreconditionError(f"|P|_(p->q) = {norm_pq:.12g} exceeds 1; the contraction premise is unmet")
        factor = (p - 1.0) * q / (p * (q - 1.0))
        P, mu, n = op.P, op.mu, op.n
        rng = stream(seed, 0, TRIALS)

        f = rng.dirichlet(np.ones(n), size=trials)
        f /= (f @ mu)[:, None]
        ent_gap = factor * entropy(f, mu) + AUDIT_SLACK - entropy(f @ P.T, mu)

        g = rng.standard_normal((trials, n))
        g -= (g @ mu)[:, None]
        var_gap = factor * ((g * g) @ mu) + AUDIT_SLACK - (((g @ P.T) - ((g @ P.T) @ mu)[:, None]) ** 2 @ mu)

        violations = int(np.sum(ent_gap < 0) + np.sum(var_gap < 0))
        holds = violations == 0
        log = logger.info if holds else logger.warning
        log(f"Entropy contraction audit (p={p}, q={q}): {violations} violations in {trials} trials")
        return ConditionReport("entropy_contraction", holds, {
            "factor": factor,
            "norm_pq": norm_pq,
            "worst_entropy_margin": float(ent_gap.min()),
            "worst_variance_margin": float(var_gap.min()),
            "violations": violations,
            "trials": trials,
        })

    # --- Hypercontractivity ---

    def hypercontractive_power(self, op: FiniteMarkovOperator, n_max: int,
                               seed: int = 0) -> Tuple[Optional[int], float]:
        """Smallest n <= n_max with |P^n|_{2->4} <= 1 + 1e-9, and the last norm computed."""
        delta = self.norm_2_to_4(op, seed) ** 4
        if delta >= 2.0 - NORM_TOL:
            raise PreconditionError(f"delta(P) = {delta:.12g} is not below 2")
        norm = float("nan")
        for k in range(1, n_max + 1):
            norm = self.norm_2_to_4(op.power(k), seed)
            if norm <= 1.0 + NORM_TOL:
                return k, norm
        return None, norm

    def norm_report(self, op: FiniteMarkovOperator, n_max: int = 50, seed: int = 0) -> NormReport:
        gap = self.norm2_gap(op)
        delta = self.norm_2_to_4(op, seed) ** 4
        if delta < 2.0 - NORM_TOL:
            bound = self.prop_p_bound(delta)
            n_power, _ = self.hypercontractive_power(op, n_max, seed)
        else:
            bound, n_power = None, None
        report = NormReport(norm_2_gap=gap, delta=delta, bound=bound, n_power=n_power)
        logger.info(f"Norm report n={op.n}: gap {gap:.6g}, delta {delta:.6g}, bound {bound}, n_power {n_power}")
        return report
