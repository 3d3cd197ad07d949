# services/coupling_service.py
"""
Path simulation and couplings.

Paths use Euler-Maruyama; Galerkin systems in `integrate_path` and `evolve`
take the exact e^{-L dt} factor first and the explicit remainder after.
The control coupling runs (X, Y) from eta and the controlled (Xbar, Ybar)
from xi on the same increments, with explicit Euler on the effective drift
for both.
"""

import logging
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh, expm
from scipy.special import logsumexp

from errors import BlowUpError, PreconditionError
from models import ConditionReport, CouplingTranscript, PathSample, StatePair, SystemSpec
from services.conditions_service import ConditionService, alpha_lambda_prime
from services.model_service import ModelService
from utils.linalg import expm_batch, integrate
from utils.parallel import map_blocks
from utils.rng import PATHS, TRIALS, gaussian_block, stream

logger = logging.getLogger(__name__)

MIN_T0_STEPS = 10
GRID_RTOL = 1e-9
SYNC_SLACK = 1e-6
GALERKIN_SLACK = 1e-3


def steps_for(dt: float, T: float) -> int:
    """Number of uniform steps; dt must divide T."""
    if not dt > 0:
        raise PreconditionError(f"dt must be positive, got {dt}")
    if T < dt:
        raise PreconditionError(f"horizon {T} is shorter than dt={dt}")
    n = int(round(T / dt))
    if abs(n * dt - T) > GRID_RTOL * T:
        raise PreconditionError(f"dt={dt} does not divide T={T}")
    return n


def weight_diagnostics(log_weights: np.ndarray) -> Dict[str, float]:
    """Mean of R with its standard error, and the effective sample size of R."""
    log_weights = np.asarray(log_weights, dtype=float)
    n = log_weights.size
    w = np.exp(log_weights - log_weights.max())
    ess = float(w.sum() ** 2 / np.sum(w * w))
    R = np.exp(log_weights)
    return {
        "weight_mean": float(R.mean()),
        "weight_se": float(R.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0,
        "log_mean_R2": float(logsumexp(2.0 * log_weights) - np.log(n)),
        "ess": ess,
        "ess_fraction": ess / n,
    }


class CouplingService:
    """
    Simulates the system and builds the synchronous and control couplings.
    """

    def __init__(self, model_service: ModelService, condition_service: ConditionService):
        self.models = model_service
        self.conditions = condition_service

    # --- Stepping ---

    def _step_parts(self, spec: SystemSpec, dt: float, splitting: bool):
        """Matrices and decay factors used by `_advance`."""
        if splitting:
            return spec.A.T, np.exp(-spec.l1 * dt), np.exp(-spec.l2 * dt)
        return spec.a_eff.T, None, None

    def _advance(self, spec: SystemSpec, x: np.ndarray, y: np.ndarray, dt: float, dW: np.ndarray,
                 parts, splitting: bool) -> Tuple[np.ndarray, np.ndarray]:
        aT, e1, e2 = parts
        if splitting:
            z = self.models.drift_batch(spec, x, y)
            return e1 * (x + (x @ aT + y @ spec.B.T) * dt), e2 * (y + z * dt + dW @ spec.sigma.T)
        z = self.models.effective_drift_batch(spec, x, y)
        return x + (x @ aT + y @ spec.B.T) * dt, y + z * dt + dW @ spec.sigma.T

    def evolve(self, spec: SystemSpec, u0: np.ndarray, dt: float, n_steps: int, seed: int,
               indices: Sequence[int], tag: int = PATHS, checkpoints: Optional[Sequence[int]] = None,
               noise_scale: float = 1.0, splitting: Optional[bool] = None) -> np.ndarray:
        """
        Advance the batch `u0` (one row per path index) by `n_steps`.

        Returns the terminal states, shape (n, dim), or, when `checkpoints`
        lists step numbers, the states at those steps, shape (n, k, dim).
        """
        splitting = spec.has_stiff_part if splitting is None else splitting
        u0 = np.atleast_2d(np.asarray(u0, dtype=float))
        m = spec.m
        noise = gaussian_block(seed, indices, n_steps, spec.d, tag) * (noise_scale * np.sqrt(dt))
        parts = self._step_parts(spec, dt, splitting)
        x, y = u0[:, :m].copy(), u0[:, m:].copy()
        wanted = {} if checkpoints is None else {int(c): i for i, c in enumerate(checkpoints)}
        out = np.empty((u0.shape[0], len(wanted), spec.dim)) if wanted else None
        if 0 in wanted:
            out[:, wanted[0]] = u0
        for k in range(n_steps):
            x, y = self._advance(spec, x, y, dt, noise[:, k], parts, splitting)
            if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                logger.error(f"Blow-up at step {k + 1} (dt={dt}, seed={seed})")
                raise BlowUpError(k + 1)
            if k + 1 in wanted:
                out[:, wanted[k + 1], :m] = x
                out[:, wanted[k + 1], m:] = y
        if wanted:
            return out
        return np.hstack([x, y])

    def integrate_path(self, spec: SystemSpec, xi0: StatePair, dt: float, T: float, seed: int,
                       index: int = 0, noise_scale: float = 1.0) -> PathSample:
        n_steps = steps_for(dt, T)
        states = self.evolve(spec, xi0.as_vector(), dt, n_steps, seed, [index],
                             checkpoints=range(n_steps + 1), noise_scale=noise_scale)[0]
        return PathSample(grid=np.arange(n_steps + 1) * dt, states=states, m=spec.m, seed=seed)

    def simulate_sync_pair(self, spec: SystemSpec, xi0: StatePair, eta0: StatePair, dt: float, T: float,
                           seed: int, index: int = 0) -> Tuple[PathSample, PathSample]:
        """Two solutions driven by the same Gaussian increments."""
        n_steps = steps_for(dt, T)
        u0 = np.vstack([xi0.as_vector(), eta0.as_vector()])
        states = self.evolve(spec, u0, dt, n_steps, seed, [index, index], checkpoints=range(n_steps + 1))
        grid = np.arange(n_steps + 1) * dt
        return (PathSample(grid, states[0], spec.m, seed), PathSample(grid, states[1], spec.m, seed))

    # --- Contraction functional ---

    @staticmethod
    def phi_form(r: float, B: np.ndarray) -> np.ndarray:
        B = np.atleast_2d(B)
        m, d = B.shape
        W = 0.5 * np.eye(m + d)
        W[:m, m:] = 0.5 * r * B
        W[m:, :m] = 0.5 * r * B.T
        return W

    def phi_functional(self, dx: np.ndarray, dy: np.ndarray, r: float, B: np.ndarray) -> Tuple[float, float]:
        """
        Phi = |dx|^2/2 + |dy|^2/2 + r <dx, B dy> and the constant C with
        |d|^2 / C <= Phi <= C |d|^2.
        """
        B = np.atleast_2d(np.asarray(B, dtype=float))
        norm_B = float(np.linalg.norm(B, 2))
        if abs(r) * norm_B >= 1.0:
            raise PreconditionError(f"|r| must be below 1/|B| = {1.0 / norm_B:.6g}, got {r}")
        eigs = eigh(self.phi_form(r, B), eigvals_only=True)
        C = float(max(eigs[-1], 1.0 / eigs[0]))
        dx, dy = np.atleast_1d(dx), np.atleast_1d(dy)
        value = 0.5 * float(dx @ dx) + 0.5 * float(dy @ dy) + r * float(dx @ (B @ dy))
        return value, C

    def sync_contraction_audit(self, spec: SystemSpec, n_pairs: int, T: float, dt: float, seed: int,
                               r: Optional[float] = None, threads: int = 0) -> ConditionReport:
        """
        Discrete check of Phi_{k+1} <= Phi_k e^{-(theta/C) dt} (1 + 1e-6) along
        synchronous pairs started from random differences.
        """
        if n_pairs < 1:
            raise PreconditionError(f"n_pairs must be >= 1, got {n_pairs}")
        a3 = self.conditions.check_A3_linear(spec, None if r is None else [r])
        r, theta = a3.witnesses["best_r"], a3.witnesses["best_theta"]
        if theta <= 0:
            raise PreconditionError(f"(A3) has no positive theta at r={r}; nothing to audit")
        _, C = self.phi_functional(np.zeros(spec.m), np.zeros(spec.d), r, spec.B)
        W = self.phi_form(r, spec.B)
        n_steps = steps_for(dt, T)
        factor = np.exp(-(theta / C) * dt) * (1.0 + SYNC_SLACK)
        splitting = spec.has_stiff_part
        parts = self._step_parts(spec, dt, splitting)
        m = spec.m

        def run(block: range) -> Tuple[float, int]:
            n = len(block)
            starts = np.vstack([stream(seed, i, TRIALS).standard_normal(2 * spec.dim) for i in block])
            base, gap = starts[:, :spec.dim], starts[:, spec.dim:]
            noise = gaussian_block(seed, block, n_steps, spec.d) * np.sqrt(dt)
            u = np.vstack([base, base + gap])
            x, y = u[:, :m], u[:, m:]
            noise = np.concatenate([noise, noise])
            diff = gap
            phi = np.einsum("ij,jk,ik->i", diff, W, diff)
            worst, violations = 0.0, 0
            for k in range(n_steps):
                x, y = self._advance(spec, x, y, dt, noise[:, k], parts, splitting)
                if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
                    raise BlowUpError(k + 1)
                diff = np.hstack([x[n:] - x[:n], y[n:] - y[:n]])
                phi_next = np.einsum("ij,jk,ik->i", diff, W, diff)
                ratio = phi_next / (phi * factor)
                worst = max(worst, float(ratio.max()))
                violations += int(np.sum(ratio > 1.0))
                phi = phi_next
            return worst, violations

        results = map_blocks(run, n_pairs, threads)
        worst = max(w for w, _ in results)
        violations = sum(v for _, v in results)
        holds = violations == 0
        log = logger.info if holds else logger.warning
        log(f"Synchronous contraction on {spec.name}: worst ratio {worst:.6g}, {violations} violations")
        return ConditionReport("sync_contraction", holds, {
            "r": r, "theta": theta, "C": C, "rate": theta / C, "worst_ratio": worst,
            "violations": violations, "n_pairs": n_pairs, "steps": n_steps,
        }, "Phi_{k+1} / (Phi_k e^{-(theta/C) dt})")

    # --- Control coupling ---

    @staticmethod
    def _gap(xi: StatePair, eta: StatePair) -> Tuple[np.ndarray, np.ndarray]:
        """(X_0 - Xbar_0, Y_0 - Ybar_0) with X from eta and Xbar from xi."""
        return eta.x - xi.x, eta.y - xi.y

    def control_vector(self, spec: SystemSpec, xi: StatePair, eta: StatePair, t0: float) -> np.ndarray:
        if not t0 > 0:
            raise PreconditionError(f"t0 must be positive, got {t0}")
        A = spec.a_eff
        dx0, dy0 = self._gap(xi, eta)
        if not (np.any(dx0) or np.any(dy0)):
            return np.zeros(spec.m)
        rank = self.conditions.kalman_rank(A, spec.B)
        if not rank.holds:
            raise PreconditionError(f"rank condition fails (rank {rank.witnesses['rank']} < {spec.m}); no control exists")
        Q = self.conditions.gramian(A, spec.B, t0, weighted=True)
        J = integrate(lambda s: expm_batch(A, t0 - s) * ((t0 - s) / t0)[:, None, None], 0.0, t0)
        rhs = expm(t0 * A) @ dx0 + J @ (spec.B @ dy0)
        try:
            return np.linalg.solve(Q, rhs)
        except np.linalg.LinAlgError as e:
            logger.error(f"Weighted Gramian solve failed: {e}")
            raise PreconditionError("weighted Gramian is singular") from e

    def closed_form_difference(self, spec: SystemSpec, xi: StatePair, eta: StatePair, t0: float,
                               b: np.ndarray, t: float) -> Tuple[np.ndarray, np.ndarray]:
        """Exact (X_t - Xbar_t, Y_t - Ybar_t) of the controlled pair."""
        if not 0.0 <= t <= t0:
            raise PreconditionError(f"t must lie in [0, {t0}], got {t}")
        A, B = spec.a_eff, spec.B
        dx0, dy0 = self._gap(xi, eta)
        b = np.asarray(b, dtype=float)

        def dy(s: np.ndarray) -> np.ndarray:
            v = expm_batch(A.T, t0 - s) @ b
            return ((t0 - s) / t0)[:, None] * dy0[None, :] - (s * (t0 - s))[:, None] * (v @ B)

        dx = expm(t * A) @ dx0
        if t > 0:
            dx = dx + integrate(lambda s: np.einsum("nij,nj->ni", expm_batch(A, t - s), dy(s) @ B.T), 0.0, t)
        return dx, dy(np.array([t]))[0]

    def _g_prime(self, spec: SystemSpec, b: np.ndarray, t0: float, dt: float, n_steps: int) -> np.ndarray:
        """
        d/dt { t (t0 - t) B^T e^{(t0 - t) A^T} b } at the left endpoints t_k.
        e^{(t0 - t_k) A^T} b is built backwards from t0 with one exponential.
        """
        A, B = spec.a_eff, spec.B
        step = expm(dt * A.T)
        v = np.empty((n_steps + 1, spec.m))
        v[n_steps] = b
        for k in range(n_steps - 1, -1, -1):
            v[k] = step @ v[k + 1]
        t = np.arange(n_steps) * dt
        v = v[:n_steps]
        return ((t0 - 2.0 * t)[:, None] * (v @ B)) - ((t * (t0 - t))[:, None] * (v @ A @ B))

    def _coupling_setup(self, spec: SystemSpec, xi: StatePair, eta: StatePair, t0: float, dt: float):
        n_steps = steps_for(dt, t0)
        if n_steps < MIN_T0_STEPS:
            raise PreconditionError(f"t0 must be at least {MIN_T0_STEPS} * dt, got t0={t0}, dt={dt}")
        b = self.control_vector(spec, xi, eta, t0)
        _, dy0 = self._gap(xi, eta)
        shift = dy0 / t0 + self._g_prime(spec, b, t0, dt, n_steps)
        return n_steps, b, shift

    def _couple(self, spec: SystemSpec, xi: StatePair, eta: StatePair, dt: float, shift: np.ndarray,
                noise: np.ndarray, record: bool = False) -> Dict[str, np.ndarray]:
        """Run a batch of coupled pairs; `noise` holds standard normals (n, steps, d)."""
        n, n_steps, _ = noise.shape
        m = spec.m
        aT, BT = spec.a_eff.T, spec.B.T
        sigma_T = spec.sigma.T
        sigma_inv_T = np.linalg.inv(spec.sigma).T
        sqrt_dt = np.sqrt(dt)
        x, y = np.tile(eta.x, (n, 1)), np.tile(eta.y, (n, 1))
        xb, yb = np.tile(xi.x, (n, 1)), np.tile(xi.y, (n, 1))
        log_w = np.zeros(n)
        psi_sq_max = np.zeros(n)
        if record:
            path = np.empty((n, n_steps + 1, spec.dim))
            bar = np.empty((n, n_steps + 1, spec.dim))
            psi_all = np.empty((n, n_steps, spec.d))
            path[:, 0] = np.hstack([x, y])
            bar[:, 0] = np.hstack([xb, yb])
        for k in range(n_steps):
            dW = noise[:, k] * sqrt_dt
            z = self.models.effective_drift_batch(spec, x, y)
            zb = self.models.effective_drift_batch(spec, xb, yb)
            psi = z - zb + shift[k]
            u = psi @ sigma_inv_T
            log_w -= np.einsum("ij,ij->i", u, dW) + 0.5 * dt * np.einsum("ij,ij->i", u, u)
            psi_sq_max = np.maximum(psi_sq_max, np.einsum("ij,ij->i", psi, psi))
            noise_term = dW @ sigma_T
            x, y, xb, yb = (
                x + (x @ aT + y @ BT) * dt,
                y + z * dt + noise_term,
                xb + (xb @ aT + yb @ BT) * dt,
                yb + (z + shift[k]) * dt + noise_term,
            )
            if not (np.all(np.isfinite(y)) and np.all(np.isfinite(yb)) and np.all(np.isfinite(log_w))):
                logger.error(f"Control coupling blew up at step {k + 1}")
                raise BlowUpError(k + 1)
            if record:
                path[:, k + 1] = np.hstack([x, y])
                bar[:, k + 1] = np.hstack([xb, yb])
                psi_all[:, k] = psi
        out = {
            "log_weight": log_w,
            "terminal_gap": np.linalg.norm(x - xb, axis=1) + np.linalg.norm(y - yb, axis=1),
            "terminal": np.hstack([x, y]),
            "psi_sq_max": psi_sq_max,
        }
        if record:
            out.update(path=path, bar_path=bar, psi=psi_all)
        return out

    def simulate_control_coupling(self, spec: SystemSpec, xi: StatePair, eta: StatePair, t0: float,
                                  dt: float, seed: int, index: int = 0) -> CouplingTranscript:
        n_steps, b, shift = self._coupling_setup(spec, xi, eta, t0, dt)
        noise = gaussian_block(seed, [index], n_steps, spec.d)
        out = self._couple(spec, xi, eta, dt, shift, noise, record=True)
        grid = np.arange(n_steps + 1) * dt
        gap_sq = float(np.sum((eta.as_vector() - xi.as_vector()) ** 2))
        return CouplingTranscript(
            t0=t0,
            control_b=b,
            path=PathSample(grid, out["path"][0], spec.m, seed),
            bar_path=PathSample(grid, out["bar_path"][0], spec.m, seed),
            psi=out["psi"][0],
            log_weight=float(out["log_weight"][0]),
            terminal_gap=float(out["terminal_gap"][0]),
            c1=float(out["psi_sq_max"][0] / gap_sq) if gap_sq > 0 else 0.0,
        )

    def coupling_batch(self, spec: SystemSpec, xi: StatePair, eta: StatePair, t0: float, dt: float,
                       n_paths: int, seed: int, threads: int = 0) -> Dict[str, np.ndarray]:
        """Monte Carlo over transcripts; arrays are ordered by path index."""
        if n_paths < 1:
            raise PreconditionError(f"n_paths must be >= 1, got {n_paths}")
        n_steps, b, shift = self._coupling_setup(spec, xi, eta, t0, dt)

        def run(block: range) -> Dict[str, np.ndarray]:
            return self._couple(spec, xi, eta, dt, shift, gaussian_block(seed, block, n_steps, spec.d))

        parts = map_blocks(run, n_paths, threads)
        out = {key: np.concatenate([p[key] for p in parts]) for key in parts[0]}
        out["control_b"] = b
        diag = weight_diagnostics(out["log_weight"])
        logger.info(f"Coupled {n_paths} paths on {spec.name}: mean R {diag['weight_mean']:.6g} "
                    f"+- {diag['weight_se']:.2g}, ESS fraction {diag['ess_fraction']:.3g}, seed={seed}")
        return out

    # --- Galerkin contraction ---

    def galerkin_contraction(self, spec: SystemSpec, delta0: StatePair,
                             t_grid: Iterable[float]) -> ConditionReport:
        """
        Worst ratio of (alpha |dX_t| + |dY_t|) to e^{-lambda t}(alpha |dX_0| + |dY_0|)
        along the exact difference ODE, lambda = lambda_1 - lambda'.
        """
        delta = self.conditions.galerkin_delta(spec)
        K1, K2 = spec.lipschitz
        alpha, lambda_prime = alpha_lambda_prime(delta, K1, K2, spec.norm_B)
        rate = float(spec.l2[0]) - lambda_prime
        t_grid = np.asarray(list(t_grid), dtype=float)
        if t_grid.size == 0 or np.any(t_grid < 0):
            raise PreconditionError("t_grid must be a non-empty set of times >= 0")
        M = self.models.full_drift_matrix(spec)
        d0 = delta0.as_vector()
        d_t = expm_batch(M, t_grid) @ d0
        m = spec.m

        def weighted(v: np.ndarray) -> np.ndarray:
            return alpha * np.linalg.norm(v[..., :m], axis=-1) + np.linalg.norm(v[..., m:], axis=-1)

        start = float(weighted(d0))
        if start == 0.0:
            raise PreconditionError("initial difference is zero")
        ratios = weighted(d_t) / (np.exp(-rate * t_grid) * start)
        worst = float(ratios.max())
        holds = worst <= 1.0 + GALERKIN_SLACK
        logger.info(f"Galerkin contraction: alpha={alpha:.6g}, lambda={rate:.6g}, worst ratio {worst:.6g}")
        return ConditionReport("galerkin_contraction", holds, {
            "alpha": alpha, "lambda_prime": lambda_prime, "rate": rate, "delta": delta,
            "worst_ratio": worst, "points": int(t_grid.size),
        })
