# services/estimate_service.py
"""
Monte Carlo and exact estimators: stationary covariance, ergodic moments,
exponential moments, semigroup values, decay rates and the Harnack audit.
"""

import logging
import re
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import NotHurwitzError, NumericalError, OverflowEstimateError, PreconditionError, WeightDegeneracyError
from models import ConditionReport, EstimateReport, StatePair, SystemSpec
from services.coupling_service import CouplingService, steps_for
from services.model_service import ModelService
from utils.parallel import map_blocks
from utils.rng import OUTER, PATHS

logger = logging.getLogger(__name__)

N_BATCHES = 20
N_CHECKPOINTS = 20
STATIONARITY_SLOPE = 0.5
MIN_INNER = 100
MIN_ESS_FRACTION = 0.01
OVERFLOW_EXPONENT = 700.0
DEFAULT_THIN = 1000
ENTROPY_MAX_DIM = 2
RESIDUAL_THRESHOLD = 0.5

OBSERVABLES = ("coord_x", "coord_y", "quadratic", "bounded_tanh", "indicator_halfspace")
BOUNDED_OBSERVABLES = ("bounded_tanh", "indicator_halfspace")

Observable = Callable[[np.ndarray], np.ndarray]


def observable(tag: str, spec: SystemSpec, params: Optional[Dict[str, Any]] = None) -> Observable:
    """
    Catalog observable evaluated on states of shape (n, m + d).
    `coord_x_2` is shorthand for tag `coord_x` with index 2.
    """
    params = dict(params or {})
    match = re.fullmatch(r"(coord_[xy])_(\d+)", tag)
    if match:
        tag, params["index"] = match.group(1), int(match.group(2))
    if tag not in OBSERVABLES:
        raise PreconditionError(f"unknown observable '{tag}', expected one of {OBSERVABLES}")
    m = spec.m
    if tag in ("coord_x", "coord_y"):
        index = int(params.get("index", 0))
        size = m if tag == "coord_x" else spec.d
        if not 0 <= index < size:
            raise PreconditionError(f"{tag} index {index} out of range for size {size}")
        column = index if tag == "coord_x" else m + index
        return lambda u: u[..., column]
    if tag == "quadratic":
        return lambda u: np.sum(u * u, axis=-1)
    if tag == "bounded_tanh":
        column = int(params.get("index", 0))
        scale = float(params.get("scale", 1.0))
        return lambda u: np.tanh(scale * u[..., column])
    normal = np.asarray(params.get("normal", np.eye(spec.dim)[0]), dtype=float)
    if normal.shape != (spec.dim,):
        raise PreconditionError(f"indicator_halfspace normal must have {spec.dim} entries")
    offset = float(params.get("offset", 0.0))
    return lambda u: (u @ normal >= offset).astype(float)


def _log_fit(t: np.ndarray, values: np.ndarray) -> Dict[str, float]:
    """Least squares of log(values) = log(c) - rate * t."""
    X = np.column_stack([np.ones_like(t), t])
    y = np.log(values)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    residuals = y - X @ coef
    dof = max(t.size - 2, 1)
    s2 = float(residuals @ residuals) / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    return {
        "rate": float(-coef[1]),
        "rate_se": float(np.sqrt(cov[1, 1])),
        "prefactor": float(np.exp(coef[0])),
        "residual_rms": float(np.sqrt(np.mean(residuals ** 2))),
    }


class EstimateService:
    """
    Estimators for invariant moments, decay and Harnack-type bounds.
    """

    def __init__(self, model_service: ModelService, coupling_service: CouplingService):
        self.models = model_service
        self.coupling = coupling_service

    # --- Exact linear oracle ---

    def stationary_covariance_linear(self, spec: SystemSpec) -> np.ndarray:
        """Solve M S + S M^T + [0; sigma][0; sigma]^T = 0 by a Kronecker linear solve."""
        M = self.models.full_drift_matrix(spec)
        eigs = np.linalg.eigvals(M)
        if np.any(eigs.real >= 0):
            logger.error(f"Drift matrix of {spec.name} is not Hurwitz (max real part {eigs.real.max():.6g})")
            raise NotHurwitzError(f"full drift matrix is not Hurwitz, max real part {eigs.real.max():.6g}")
        n = spec.dim
        noise = np.zeros((n, spec.d))
        noise[spec.m:] = spec.sigma
        eye = np.eye(n)
        lhs = np.kron(M, eye) + np.kron(eye, M)
        S = np.linalg.solve(lhs, -(noise @ noise.T).ravel()).reshape(n, n)
        return 0.5 * (S + S.T)

    def stationary_mean_linear(self, spec: SystemSpec) -> np.ndarray:
        M = self.models.full_drift_matrix(spec)
        return np.linalg.solve(M, -self.models.drift_offset(spec))

    # --- Ergodic averages ---

    @staticmethod
    def stationarity_slope(samples: np.ndarray, n_batches: int = N_BATCHES) -> float:
        """
        Log-log slope of the covariance trace of growing windows against
        window length. Near 0 for a stationary path, near 1 for Brownian motion.
        """
        edges = np.linspace(0, samples.shape[0], n_batches + 1).astype(int)
        lengths, traces = [], []
        for j in range(2, n_batches + 1):
            window = samples[:edges[j]]
            lengths.append(edges[j])
            traces.append(max(float(np.trace(np.atleast_2d(np.cov(window, rowvar=False)))), np.finfo(float).tiny))
        slope = np.polyfit(np.log(lengths), np.log(traces), 1)[0]
        return float(slope)

    def ergodic_moments(self, spec: SystemSpec, dt: float, T: float, burn_in: float, seed: int,
                        start: Optional[StatePair] = None) -> List[EstimateReport]:
        """
        Time averages of the state and of its covariance over [burn_in, T],
        one report per entry, named mean_i and cov_i_j.
        """
        if not T > burn_in >= 0:
            raise PreconditionError(f"need T > burn_in >= 0, got T={T}, burn_in={burn_in}")
        start = start or StatePair(np.zeros(spec.m), np.zeros(spec.d))
        path = self.coupling.integrate_path(spec, start, dt, T, seed)
        k0 = int(round(burn_in / dt))
        samples = np.asarray(path.states[k0 + 1:])
        n = samples.shape[0]
        if n < N_BATCHES * 2:
            raise PreconditionError(f"only {n} samples after burn-in; need at least {2 * N_BATCHES}")

        batches = np.array_split(samples, N_BATCHES)
        mean = samples.mean(axis=0)
        batch_means = np.array([b.mean(axis=0) for b in batches])
        centered = samples - mean
        cov = centered.T @ centered / n
        batch_covs = np.array([(b - mean).T @ (b - mean) / b.shape[0] for b in batches])
        mean_se = batch_means.std(axis=0, ddof=1) / np.sqrt(N_BATCHES)
        cov_se = batch_covs.std(axis=0, ddof=1) / np.sqrt(N_BATCHES)

        slope = self.stationarity_slope(samples)
        stationary = slope <= STATIONARITY_SLOPE
        if not stationary:
            logger.warning(f"Path of {spec.name} looks non-stationary (window slope {slope:.3g})")
        meta = {"dt": dt, "T": T, "burn_in": burn_in, "batches": N_BATCHES,
                "stationarity_slope": slope, "stationary": stationary}

        reports = [EstimateReport(f"mean_{i}", float(mean[i]), float(mean_se[i]), n, seed, dict(meta))
                   for i in range(spec.dim)]
        for i in range(spec.dim):
            for j in range(spec.dim):
                reports.append(EstimateReport(f"cov_{i}_{j}", float(cov[i, j]), float(cov_se[i, j]), n, seed, dict(meta)))
        logger.info(f"Ergodic moments of {spec.name}: {n} samples, trace cov {np.trace(cov):.6g}, seed={seed}")
        return reports

    @staticmethod
    def as_matrix(reports: Sequence[EstimateReport], dim: int) -> Tuple[np.ndarray, np.ndarray]:
        """(mean vector, covariance matrix) from ergodic_moments output."""
        by_name = {r.name: r.value for r in reports}
        mean = np.array([by_name[f"mean_{i}"] for i in range(dim)])
        cov = np.array([[by_name[f"cov_{i}_{j}"] for j in range(dim)] for i in range(dim)])
        return mean, cov

    # --- Exponential moments ---

    def _terminal_batch(self, spec: SystemSpec, u0: np.ndarray, dt: float, n_steps: int, seed: int,
                        n_paths: int, tag: int, checkpoints: Sequence[int], threads: int) -> np.ndarray:
        """Paths from `u0` (one row, or one row per path) sampled at `checkpoints`."""
        u0 = np.atleast_2d(u0)

        def run(block: range) -> np.ndarray:
            start = u0[list(block)] if u0.shape[0] > 1 else np.repeat(u0, len(block), axis=0)
            return self.coupling.evolve(spec, start, dt, n_steps, seed, block, tag, checkpoints)

        return np.concatenate(map_blocks(run, n_paths, threads))

    def exp_moment_curve(self, spec: SystemSpec, eps: float, dt: float, T: float, n_paths: int, seed: int,
                         threads: int = 0) -> Tuple[List[EstimateReport], Dict[str, Any]]:
        """
        E exp(eps |u_t|^2) from u_0 = 0 at 20 uniform checkpoints, with a
        boundedness diagnostic. Overflow is reported, not raised.
        """
        if eps < 0:
            raise PreconditionError(f"eps must be >= 0, got {eps}")
        if n_paths < 2:
            raise PreconditionError("exp_moment_curve needs at least 2 paths")
        n_steps = steps_for(dt, T)
        checkpoints = [int(round(n_steps * (j + 1) / N_CHECKPOINTS)) for j in range(N_CHECKPOINTS)]
        states = self._terminal_batch(spec, np.zeros(spec.dim), dt, n_steps, seed, n_paths, PATHS,
                                      checkpoints, threads)
        sq = np.sum(states * states, axis=-1)

        threshold = None
        if self.models.is_linear(spec):
            try:
                S = self.stationary_covariance_linear(spec)
                threshold = 1.0 / (2.0 * float(np.linalg.eigvalsh(S)[-1]))
            except NotHurwitzError:
                threshold = 0.0

        def safe(e: float) -> bool:
            z = e * sq[:, -1]
            if z.max() > OVERFLOW_EXPONENT:
                return False
            w = np.exp(z - z.max())
            if (w.sum() ** 2 / np.sum(w * w)) / n_paths < MIN_ESS_FRACTION:
                return False
            return threshold is None or e < threshold

        if safe(eps):
            largest_safe = eps
        else:
            lo, hi = 0.0, eps
            for _ in range(60):
                mid = 0.5 * (lo + hi)
                lo, hi = (mid, hi) if safe(mid) else (lo, mid)
            largest_safe = lo

        summary: Dict[str, Any] = {
            "eps": eps, "largest_safe_eps": largest_safe, "gaussian_threshold": threshold,
            "diverges": not safe(eps), "overflow": bool(eps * sq.max() > OVERFLOW_EXPONENT),
        }
        if summary["overflow"]:
            logger.warning(f"exp moment with eps={eps} overflows; largest safe eps {largest_safe:.6g}")
            summary["bounded"] = False
            return [], summary

        values = np.exp(eps * sq)
        curve = values.mean(axis=0)
        se = values.std(axis=0, ddof=1) / np.sqrt(n_paths)
        reports = [
            EstimateReport("exp_moment", float(curve[j]), float(se[j]), n_paths, seed,
                           {"t": checkpoints[j] * dt, "eps": eps, "dt": dt, "T": T})
            for j in range(N_CHECKPOINTS)
        ]
        summary["bounded"] = bool(curve[-1] <= 2.0 * np.median(curve))
        if summary["diverges"]:
            logger.warning(f"exp moment with eps={eps} flagged divergent (largest safe eps {largest_safe:.6g})")
        logger.info(f"exp moment curve eps={eps}: final {curve[-1]:.6g}, bounded={summary['bounded']}, seed={seed}")
        return reports, summary

    # --- Semigroup ---

    def semigroup_apply(self, spec: SystemSpec, f: str, xi: StatePair, t: float, inner_n: int, dt: float,
                        seed: int, f_params: Optional[Dict[str, Any]] = None, threads: int = 0) -> EstimateReport:
        """P_t f(xi) as an average of f over `inner_n` paths from xi."""
        if inner_n < MIN_INNER:
            raise PreconditionError(f"inner_n must be >= {MIN_INNER}, got {inner_n}")
        fn = observable(f, spec, f_params)
        meta = {"t": t, "dt": dt, "inner_n": inner_n, "f": f}
        if t == 0:
            return EstimateReport("semigroup", float(fn(xi.as_vector()[None, :])[0]), 0.0, 1, seed, meta)
        n_steps = steps_for(dt, t)
        states = self._terminal_batch(spec, xi.as_vector(), dt, n_steps, seed, inner_n, PATHS, [n_steps], threads)
        values = fn(states[:, 0])
        return EstimateReport("semigroup", float(values.mean()), float(values.std(ddof=1) / np.sqrt(inner_n)),
                              inner_n, seed, meta)

    def outer_points(self, spec: SystemSpec, outer_n: int, dt: float, burn_in: float, seed: int,
                     thin: int = DEFAULT_THIN, sampler: str = "thinned", threads: int = 0) -> np.ndarray:
        """
        Approximate draws from the invariant law: every `thin`-th step of one
        long path after burn-in, or the burn-in endpoints of independent paths.
        """
        k0 = int(round(burn_in / dt))
        if sampler == "thinned":
            steps = [k0 + thin * (i + 1) for i in range(outer_n)]
            return self.coupling.evolve(spec, np.zeros(spec.dim), dt, steps[-1], seed, [0], OUTER, steps)[0]
        if sampler == "parallel":
            if k0 < 1:
                raise PreconditionError("parallel outer sampling needs burn_in >= dt")
            return self._terminal_batch(spec, np.zeros(spec.dim), dt, k0, seed, outer_n, OUTER, [k0], threads)[:, 0]
        raise PreconditionError(f"unknown outer sampler '{sampler}'")

    # --- Decay ---

    def decay_fit(self, spec: SystemSpec, f: str, t_grid: Sequence[float], outer_n: int, inner_n: int,
                  dt: float, seed: int, mode: str = "variance", burn_in: float = 20.0,
                  thin: int = DEFAULT_THIN, sampler: str = "thinned", bins: int = 64,
                  f_params: Optional[Dict[str, Any]] = None, threads: int = 0) -> EstimateReport:
        """
        Decay rate of Var(P_t f) (variance mode) or of the entropy of the
        reweighted evolved ensemble (entropy mode), fitted on log scale.
        """
        t_grid = np.asarray(list(t_grid), dtype=float)
        if t_grid.size < 2 or np.any(np.diff(t_grid) <= 0) or t_grid[0] <= 0:
            raise PreconditionError("t_grid needs at least two increasing positive times")
        steps = [steps_for(dt, t) for t in t_grid]
        fn = observable(f, spec, f_params)
        outer = self.outer_points(spec, outer_n, dt, burn_in, seed, thin, sampler, threads)

        if mode == "variance":
            values = self._variance_curve(spec, fn, outer, inner_n, dt, steps, seed, threads)
        elif mode == "entropy":
            values = self._entropy_curve(spec, fn, outer, dt, steps, seed, bins, threads)
        else:
            raise PreconditionError(f"unknown decay mode '{mode}'")

        bad = np.flatnonzero(values <= 0)
        if bad.size:
            logger.error(f"Decay estimate non-positive at t={t_grid[bad[0]]}")
            raise NumericalError(f"{mode} estimate is non-positive at t={t_grid[bad[0]]}; inner noise dominates")
        fit = _log_fit(t_grid, values)
        meta = {
            "mode": mode, "f": f, "t_grid": t_grid.tolist(), "values": values.tolist(),
            "prefactor": fit["prefactor"], "residual_rms": fit["residual_rms"],
            "residual_ok": fit["residual_rms"] < RESIDUAL_THRESHOLD,
            "outer_n": outer_n, "inner_n": inner_n, "dt": dt, "burn_in": burn_in,
        }
        logger.info(f"Decay fit ({mode}) on {spec.name}: rate {fit['rate']:.4g} +- {fit['rate_se']:.2g}, seed={seed}")
        return EstimateReport("decay_rate", fit["rate"], fit["rate_se"], outer_n, seed, meta)

    def _variance_curve(self, spec: SystemSpec, fn: Observable, outer: np.ndarray, inner_n: int, dt: float,
                        steps: List[int], seed: int, threads: int) -> np.ndarray:
        if inner_n < MIN_INNER:
            raise PreconditionError(f"inner_n must be >= {MIN_INNER}, got {inner_n}")
        f_outer = fn(outer)
        if np.ptp(f_outer) == 0:
            raise PreconditionError("f is constant on the outer sample; variance decay needs a centered, non-constant f")
        outer_n = outer.shape[0]
        starts = np.repeat(outer, inner_n, axis=0)
        states = self._terminal_batch(spec, starts, dt, steps[-1], seed, outer_n * inner_n, PATHS, steps, threads)
        values = fn(states).reshape(outer_n, inner_n, len(steps))
        inner_mean = values.mean(axis=1)
        inner_se2 = values.var(axis=1, ddof=1) / inner_n
        # debiased: Var of the inner means minus the mean inner variance of the mean
        return inner_mean.var(axis=0, ddof=1) - inner_se2.mean(axis=0)

    def _entropy_curve(self, spec: SystemSpec, fn: Observable, outer: np.ndarray, dt: float,
                       steps: List[int], seed: int, bins: int, threads: int) -> np.ndarray:
        if spec.dim > ENTROPY_MAX_DIM:
            raise PreconditionError(f"entropy decay is only estimated for m + d <= {ENTROPY_MAX_DIM}")
        weights = fn(outer)
        if np.any(weights < 0) or weights.mean() <= 0:
            raise PreconditionError("entropy mode needs f >= 0 with positive mean")
        weights = weights / weights.mean()
        states = self._terminal_batch(spec, outer, dt, steps[-1], seed, outer.shape[0], PATHS, steps, threads)
        out = np.empty(len(steps))
        for k in range(len(steps)):
            sample = states[:, k]
            counts, edges = np.histogramdd(sample, bins=bins)
            weighted, _ = np.histogramdd(sample, bins=edges, weights=weights)
            p = counts / counts.sum()
            q = weighted / weighted.sum()
            mask = q > 0
            out[k] = float(np.sum(q[mask] * np.log(q[mask] / p[mask])))
        return out

    # --- Harnack ---

    def harnack_audit(self, spec: SystemSpec, f: str, xi: StatePair, eta: StatePair, t0: float, n_paths: int,
                      dt: float, seed: int, f_params: Optional[Dict[str, Any]] = None,
                      threads: int = 0) -> Tuple[List[EstimateReport], ConditionReport]:
        """
        L = (mean R f)^2, R2 = mean R^2 and F2 = mean f^2 at t0, the sample
        Cauchy-Schwarz chain L <= R2 F2 and c0 = log R2 / |xi - eta|^2.
        For linear drifts psi is deterministic and log R2 is the exact
        sum |sigma^-1 psi|^2 dt; otherwise R2 is a Monte Carlo mean behind
        the effective-sample-size gate.
        """
        tag = re.sub(r"_\d+$", "", f)
        if tag not in BOUNDED_OBSERVABLES:
            raise PreconditionError(f"Harnack audit needs a bounded observable, got '{f}'")
        fn = observable(f, spec, f_params)
        batch = self.coupling.coupling_batch(spec, xi, eta, t0, dt, n_paths, seed, threads)
        log_w = batch["log_weight"]
        n = log_w.size
        exact = self.models.is_linear(spec)

        w = np.exp(log_w - log_w.max())
        ess_fraction = float(w.sum() ** 2 / np.sum(w * w)) / n
        if not exact and ess_fraction < MIN_ESS_FRACTION:
            logger.error(f"Weight degeneracy: ESS fraction {ess_fraction:.3g}")
            raise WeightDegeneracyError(f"effective sample size is {ess_fraction:.2%} of {n} paths")
        if log_w.max() > OVERFLOW_EXPONENT:
            logger.error(f"Girsanov weight overflows (log {log_w.max():.4g})")
            raise OverflowEstimateError(f"log R = {log_w.max():.4g} overflows a double")

        R = np.exp(log_w)
        fv = fn(batch["terminal"])
        rf_mean = float(np.mean(R * fv))
        rf_se = float(np.std(R * fv, ddof=1) / np.sqrt(n))
        L = rf_mean ** 2
        L_se = 2.0 * abs(rf_mean) * rf_se
        sample_log_R2 = float(logsumexp(2.0 * log_w) - np.log(n))
        if exact:
            psi = self.coupling.simulate_control_coupling(spec, xi, eta, t0, dt, seed).psi
            u = np.linalg.solve(spec.sigma, psi.T)
            log_R2 = float(np.sum(u * u) * dt)
        else:
            log_R2 = sample_log_R2
        if log_R2 > OVERFLOW_EXPONENT:
            logger.error(f"mean R^2 overflows (log {log_R2:.4g})")
            raise OverflowEstimateError(f"log mean R^2 = {log_R2:.4g} overflows a double")
        R2 = float(np.exp(log_R2))
        R2_se = 0.0 if exact else float(np.std(R * R, ddof=1) / np.sqrt(n))
        F2 = float(np.mean(fv * fv))
        F2_se = float(np.std(fv * fv, ddof=1) / np.sqrt(n))
        combined = float(np.sqrt(L_se ** 2 + (F2 * R2_se) ** 2 + (R2 * F2_se) ** 2))
        chain_holds = L <= R2 * F2 + 3.0 * combined

        gap_sq = float(np.sum((eta.as_vector() - xi.as_vector()) ** 2))
        c0 = log_R2 / gap_sq if gap_sq > 0 else 0.0
        c0_se = R2_se / R2 / gap_sq if gap_sq > 0 else 0.0
        meta = {"t0": t0, "dt": dt, "gap": float(np.sqrt(gap_sq)), "f": f, "ess_fraction": ess_fraction,
                "mean_terminal_gap": float(batch["terminal_gap"].mean()),
                "R2_method": "exact" if exact else "monte_carlo", "sample_log_R2": sample_log_R2}
        reports = [
            EstimateReport("L", L, L_se, n, seed, dict(meta)),
            EstimateReport("R2", R2, R2_se, n, seed, dict(meta)),
            EstimateReport("F2", F2, F2_se, n, seed, dict(meta)),
            EstimateReport("c0", c0, c0_se, n, seed, dict(meta)),
        ]
        chain = ConditionReport("cauchy_schwarz_chain", bool(chain_holds), {
            "lhs": L, "rhs": R2 * F2, "margin": R2 * F2 - L, "combined_se": combined,
        })
        logger.info(f"Harnack audit gap={meta['gap']:.4g}: c0={c0:.4g}, chain {'holds' if chain_holds else 'fails'}")
        return reports, chain

    def harnack_constant_fit(self, spec: SystemSpec, f: str, xi: StatePair, direction: Sequence[float],
                             gaps: Sequence[float], t0: float, n_paths: int, dt: float, seed: int,
                             f_params: Optional[Dict[str, Any]] = None,
                             threads: int = 0) -> Tuple[List[EstimateReport], Dict[str, Any]]:
        """
        harnack_audit at every gap along `direction`. Returns all reports
        (each carries its gap in meta) and the c0 stability summary.
        """
        direction = np.asarray(direction, dtype=float)
        norm = np.linalg.norm(direction)
        if direction.shape != (spec.dim,) or norm == 0:
            raise PreconditionError(f"direction must be a non-zero vector with {spec.dim} entries")
        if not gaps or min(gaps) <= 0:
            raise PreconditionError("gaps must be positive")
        unit = direction / norm
        all_reports, c0_reports, chains = [], [], []
        for gap in gaps:
            eta = StatePair.from_vector(xi.as_vector() + gap * unit, spec.m)
            reports, chain = self.harnack_audit(spec, f, xi, eta, t0, n_paths, dt, seed, f_params, threads)
            all_reports.extend(reports)
            c0_reports.append(next(r for r in reports if r.name == "c0"))
            chains.append(chain.holds)
        values = np.array([r.value for r in c0_reports])
        if np.any(values <= 0):
            ratio = float("inf")
        else:
            ratio = float(values.max() / values.min())
        summary = {"gaps": list(gaps), "c0": values.tolist(), "ratio": ratio,
                   "stable": ratio < 2.0, "chains_hold": all(chains)}
        if not summary["stable"]:
            logger.warning(f"Harnack constant varies by a factor {ratio:.3g} across gaps")
        return all_reports, summary
