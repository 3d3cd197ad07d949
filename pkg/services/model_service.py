# services/model_service.py
"""
System presets, drift evaluation and (de)serialization of SystemSpec.
"""

import logging
from typing import Any, Callable, Dict, List, Tuple

import numpy as np

from errors import ConfigError, PreconditionError
from models import (
    B_KINDS,
    ChainDrift,
    DriftSpec,
    GalerkinDrift,
    KineticGradientDrift,
    LinearDrift,
    StatePair,
    SystemSpec,
)

logger = logging.getLogger(__name__)

SPEC_KEYS = {"name", "dims", "matrices", "drift", "seed"}
DRIFT_PARAM_KEYS = {
    "linear": {"G", "H", "z0"},
    "kinetic_gradient": {"b_kind", "beta", "kappa"},
    "chain": {"k", "gamma", "b_kind", "beta"},
    "galerkin": {"n_modes", "exponent", "gamma", "alpha", "beta"},
}


def catalog_b(b_kind: str, y: np.ndarray, beta: float, kappa: float = 0.0) -> np.ndarray:
    if b_kind == "linear_ou":
        return -y
    if b_kind == "scaled_linear":
        return -beta * y
    if b_kind == "log_cosh":
        return -beta * y - kappa * np.tanh(y)
    raise PreconditionError(f"unknown b_kind '{b_kind}', expected one of {B_KINDS}")


def catalog_slope(b_kind: str, beta: float, kappa: float = 0.0) -> Tuple[float, bool]:
    """(c, linear) such that b(y) = -c*y when `linear` is true."""
    if b_kind == "linear_ou":
        return 1.0, True
    if b_kind == "scaled_linear":
        return beta, True
    if b_kind == "log_cosh":
        return beta, kappa == 0.0
    raise PreconditionError(f"unknown b_kind '{b_kind}', expected one of {B_KINDS}")


class ModelService:
    """
    Builds the systems the lab works on and evaluates their drifts.
    """

    def __init__(self):
        self._presets: Dict[str, Tuple[Callable[..., SystemSpec], str, Dict[str, Any]]] = {
            "kinetic_fp": (self._kinetic_fp, "Example 5.1, kinetic Fokker-Planck: A=0, B=I, sigma=sigma*I, Z=-x-y",
                           {"d": 1, "sigma": 1.0}),
            "kinetic_gradient": (self._kinetic_gradient, "Example 5.1, gradient drift Z(x,y) = b(y) - B*x, b from the catalog",
                                 {"d": 1, "b_kind": "linear_ou", "beta": 1.0, "kappa": 0.0, "sigma": 1.0}),
            "chain": (self._chain, "Example 5.2, k-block chain with A(x)_i = gamma*x_{i+1} - x_i",
                      {"k": 2, "d": 1, "gamma": 0.5, "b_kind": "scaled_linear", "beta": 1.0, "sigma": 1.0}),
            "galerkin": (self._galerkin, "Example 5.3, N-mode Galerkin truncation, lambda_i = i**exponent",
                         {"n_modes": 8, "exponent": 2.0, "gamma": 0.0, "alpha": 0.0, "beta": 0.0, "sigma": 1.0}),
        }

    # --- Presets ---

    def preset_names(self) -> List[str]:
        return list(self._presets)

    def list_presets(self) -> List[Dict[str, Any]]:
        """One row per preset with its provenance note and default parameters."""
        return [
            {"name": name, "note": note, "defaults": dict(defaults)}
            for name, (_, note, defaults) in self._presets.items()
        ]

    def build_preset(self, name: str, params: Dict[str, Any] = None) -> SystemSpec:
        if name not in self._presets:
            raise PreconditionError(f"unknown preset '{name}', expected one of {self.preset_names()}")
        builder, _, defaults = self._presets[name]
        params = dict(params or {})
        unknown = set(params) - set(defaults) - {"A", "B"}
        if unknown:
            raise PreconditionError(f"unknown parameters for preset '{name}': {sorted(unknown)}")
        merged = {**defaults, **params}
        spec = builder(**merged)
        logger.info(f"Built preset {name} with m={spec.m}, d={spec.d}")
        return spec

    @staticmethod
    def _kinetic_fp(d: int, sigma: float) -> SystemSpec:
        eye = np.eye(d)
        return SystemSpec(
            m=d, d=d, A=np.zeros((d, d)), B=eye, sigma=sigma * eye,
            drift=LinearDrift(G=-eye, H=-eye, z0=np.zeros(d)), name="kinetic_fp",
        )

    @staticmethod
    def _kinetic_gradient(d: int, b_kind: str, beta: float, kappa: float, sigma: float,
                          A: Any = None, B: Any = None) -> SystemSpec:
        A = np.zeros((d, d)) if A is None else np.asarray(A, dtype=float)
        B = np.eye(d) if B is None else np.asarray(B, dtype=float)
        if np.linalg.matrix_rank(B) < d:
            raise PreconditionError("kinetic_gradient needs an invertible B")
        return SystemSpec(
            m=d, d=d, A=A, B=B, sigma=sigma * np.eye(d),
            drift=KineticGradientDrift(b_kind=b_kind, beta=beta, kappa=kappa), name="kinetic_gradient",
        )

    @staticmethod
    def _chain(k: int, d: int, gamma: float, b_kind: str, beta: float, sigma: float) -> SystemSpec:
        if k < 2:
            raise PreconditionError(f"chain needs k >= 2, got {k}")
        if gamma == 0:
            raise PreconditionError("chain needs gamma != 0; gamma = 0 breaks the rank condition")
        m = k * d
        eye = np.eye(d)
        A = np.zeros((m, m))
        for i in range(k - 1):
            A[i * d:(i + 1) * d, i * d:(i + 1) * d] = -eye
            A[i * d:(i + 1) * d, (i + 1) * d:(i + 2) * d] = gamma * eye
        B = np.zeros((m, d))
        B[(k - 1) * d:, :] = eye
        return SystemSpec(
            m=m, d=d, A=A, B=B, sigma=sigma * eye,
            drift=ChainDrift(k=k, gamma=gamma, b_kind=b_kind, beta=beta), name="chain",
        )

    @staticmethod
    def _galerkin(n_modes: int, exponent: float, gamma: float, alpha: float, beta: float,
                  sigma: float) -> SystemSpec:
        drift = GalerkinDrift(n_modes=n_modes, exponent=exponent, gamma=gamma, alpha=alpha, beta=beta)
        lam = drift.eigenvalues()
        if n_modes < 1 or exponent <= 1.0:
            raise PreconditionError("galerkin needs n_modes >= 1 and exponent > 1 so that sum 1/lambda_i converges")
        if np.any(np.diff(lam) <= 0):
            raise PreconditionError("galerkin eigenvalues must be strictly increasing")
        m, d = 2 * n_modes, n_modes
        A = np.zeros((m, m))
        B = np.zeros((m, d))
        l1 = np.repeat(lam, 2)
        for i in range(n_modes):
            # u_{2i-1} sits at index 2i, u_{2i} at index 2i+1 (0-based)
            A[2 * i, 2 * i + 1] = gamma * lam[0]
            B[2 * i + 1, i] = 1.0
        return SystemSpec(
            m=m, d=d, A=A, B=B, sigma=sigma * np.eye(d), drift=drift, name="galerkin", l1=l1, l2=lam,
        )

    # --- Drift evaluation ---

    def drift_batch(self, spec: SystemSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Z(x, y) for arrays of shape (..., m) and (..., d)."""
        drift = spec.drift
        if isinstance(drift, LinearDrift):
            return drift.z0 + x @ drift.G.T + y @ drift.H.T
        if isinstance(drift, KineticGradientDrift):
            return catalog_b(drift.b_kind, y, drift.beta, drift.kappa) - x @ spec.B
        if isinstance(drift, ChainDrift):
            return catalog_b(drift.b_kind, y, drift.beta) - x[..., (drift.k - 1) * spec.d:]
        if isinstance(drift, GalerkinDrift):
            lam1 = drift.eigenvalues()[0]
            return -drift.alpha * lam1 * (x @ spec.B) - drift.beta * lam1 * y
        raise PreconditionError(f"unsupported drift descriptor {type(drift).__name__}")

    def effective_drift_batch(self, spec: SystemSpec, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Z(x, y) - L2 y."""
        return self.drift_batch(spec, x, y) - spec.l2 * y

    def drift_eval(self, spec: SystemSpec, s: StatePair) -> np.ndarray:
        if s.x.shape != (spec.m,) or s.y.shape != (spec.d,):
            raise PreconditionError(
                f"state dimensions ({s.x.size}, {s.y.size}) do not match system ({spec.m}, {spec.d})"
            )
        return self.drift_batch(spec, s.x, s.y)

    def is_linear(self, spec: SystemSpec) -> bool:
        drift = spec.drift
        if isinstance(drift, KineticGradientDrift):
            return catalog_slope(drift.b_kind, drift.beta, drift.kappa)[1]
        if isinstance(drift, ChainDrift):
            return catalog_slope(drift.b_kind, drift.beta)[1]
        return True

    def linear_parts(self, spec: SystemSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(G, H, z0) with Z(x, y) = z0 + Gx + Hy, for every drift reducible to that form."""
        drift = spec.drift
        eye = np.eye(spec.d)
        if isinstance(drift, LinearDrift):
            return np.array(drift.G), np.array(drift.H), np.array(drift.z0)
        if not self.is_linear(spec):
            raise PreconditionError(f"drift variant '{drift.variant}' with b_kind '{drift.b_kind}' is not linear")
        if isinstance(drift, KineticGradientDrift):
            c, _ = catalog_slope(drift.b_kind, drift.beta, drift.kappa)
            return -np.array(spec.B).T, -c * eye, np.zeros(spec.d)
        if isinstance(drift, ChainDrift):
            c, _ = catalog_slope(drift.b_kind, drift.beta)
            G = np.zeros((spec.d, spec.m))
            G[:, (drift.k - 1) * spec.d:] = -eye
            return G, -c * eye, np.zeros(spec.d)
        if isinstance(drift, GalerkinDrift):
            lam1 = drift.eigenvalues()[0]
            return -drift.alpha * lam1 * np.array(spec.B).T, -drift.beta * lam1 * eye, np.zeros(spec.d)
        raise PreconditionError(f"unsupported drift descriptor {type(drift).__name__}")

    def full_drift_matrix(self, spec: SystemSpec) -> np.ndarray:
        """
        M = [[A - L1, B], [G, H - L2]]; the noiseless dynamics are
        u' = M u + (0, z0).
        """
        G, H, _ = self.linear_parts(spec)
        top = np.hstack([spec.a_eff, spec.B])
        bottom = np.hstack([G, H - np.diag(spec.l2)])
        return np.vstack([top, bottom])

    def drift_offset(self, spec: SystemSpec) -> np.ndarray:
        _, _, z0 = self.linear_parts(spec)
        return np.concatenate([np.zeros(spec.m), z0])

    # --- Serialization ---

    def to_config(self, spec: SystemSpec, seed: int = None) -> Dict[str, Any]:
        drift = spec.drift
        if isinstance(drift, LinearDrift):
            params = {"G": drift.G.tolist(), "H": drift.H.tolist(), "z0": drift.z0.tolist()}
        elif isinstance(drift, KineticGradientDrift):
            params = {"b_kind": drift.b_kind, "beta": drift.beta, "kappa": drift.kappa}
        elif isinstance(drift, ChainDrift):
            params = {"k": drift.k, "gamma": drift.gamma, "b_kind": drift.b_kind, "beta": drift.beta}
        else:
            params = {"n_modes": drift.n_modes, "exponent": drift.exponent, "gamma": drift.gamma,
                      "alpha": drift.alpha, "beta": drift.beta}
        config = {
            "name": spec.name,
            "dims": {"m": spec.m, "d": spec.d},
            "matrices": {"A": spec.A.tolist(), "B": spec.B.tolist(), "sigma": spec.sigma.tolist()},
            "drift": {"variant": drift.variant, "params": params},
        }
        if seed is not None:
            config["seed"] = int(seed)
        return config

    def from_config(self, config: Dict[str, Any]) -> SystemSpec:
        """Parse the documented key schema; unknown keys are rejected."""
        if not isinstance(config, dict):
            raise ConfigError("system must be a mapping")
        unknown = set(config) - SPEC_KEYS
        if unknown:
            raise ConfigError(f"unknown system keys: {sorted(unknown)}")
        try:
            m, d = int(config["dims"]["m"]), int(config["dims"]["d"])
            matrices = config["matrices"]
            variant = config["drift"]["variant"]
            params = dict(config["drift"].get("params", {}))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"incomplete system description: {e}") from e
        if set(config["dims"]) - {"m", "d"} or set(matrices) - {"A", "B", "sigma"}:
            raise ConfigError("unknown keys under dims or matrices")
        if variant not in DRIFT_PARAM_KEYS:
            raise ConfigError(f"unknown drift variant '{variant}'")
        if set(params) - DRIFT_PARAM_KEYS[variant]:
            raise ConfigError(f"unknown drift params for {variant}: {sorted(set(params) - DRIFT_PARAM_KEYS[variant])}")

        drift: DriftSpec
        try:
            if variant == "linear":
                drift = LinearDrift(G=np.array(params["G"], dtype=float), H=np.array(params["H"], dtype=float),
                                    z0=np.array(params.get("z0", np.zeros(d)), dtype=float))
            elif variant == "kinetic_gradient":
                drift = KineticGradientDrift(**params)
            elif variant == "chain":
                drift = ChainDrift(**params)
            else:
                defaults = {k: v for k, v in self._presets["galerkin"][2].items() if k != "sigma"}
                galerkin = self._galerkin(sigma=1.0, **{**defaults, **params})
                return SystemSpec(
                    m=m, d=d, A=matrices["A"], B=matrices["B"], sigma=matrices["sigma"],
                    drift=galerkin.drift, name=config.get("name", "galerkin"), l1=galerkin.l1, l2=galerkin.l2,
                )
            return SystemSpec(m=m, d=d, A=matrices["A"], B=matrices["B"], sigma=matrices["sigma"],
                              drift=drift, name=config.get("name", "custom"))
        except (KeyError, TypeError) as e:
            raise ConfigError(f"invalid drift params for {variant}: {e}") from e
        except PreconditionError as e:
            raise ConfigError(str(e)) from e
