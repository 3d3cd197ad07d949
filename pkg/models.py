# models.py
"""
Domain models for the lab.
Plain frozen dataclasses; arrays are copied and made read-only on construction
so instances can be shared between worker threads.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from errors import PreconditionError


def frozen_array(values: Any, shape: Optional[Tuple[int, ...]] = None) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise PreconditionError(f"expected {shape} entries, got array of shape {arr.shape}")
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


# --- Drift descriptors ---

B_KINDS = ("linear_ou", "scaled_linear", "log_cosh")


@dataclass(frozen=True, eq=False)
class LinearDrift:
    """Z(x, y) = z0 + Gx + Hy."""

    G: np.ndarray
    H: np.ndarray
    z0: np.ndarray

    variant = "linear"


@dataclass(frozen=True)
class KineticGradientDrift:
    """Z(x, y) = b(y) - B*x with b taken from the catalog."""

    b_kind: str = "linear_ou"
    beta: float = 1.0
    kappa: float = 0.0

    variant = "kinetic_gradient"


@dataclass(frozen=True)
class ChainDrift:
    """Z(x, y) = b(y) - x_k for the k-block chain."""

    k: int
    gamma: float
    b_kind: str = "scaled_linear"
    beta: float = 1.0

    variant = "chain"


@dataclass(frozen=True)
class GalerkinDrift:
    """N-mode truncation with eigenvalues lambda_i = i**exponent."""

    n_modes: int = 8
    exponent: float = 2.0
    gamma: float = 0.0
    alpha: float = 0.0
    beta: float = 0.0

    variant = "galerkin"

    def eigenvalues(self) -> np.ndarray:
        return np.arange(1, self.n_modes + 1, dtype=float) ** self.exponent


DriftSpec = Union[LinearDrift, KineticGradientDrift, ChainDrift, GalerkinDrift]


def catalog_lipschitz(b_kind: str, beta: float, kappa: float = 0.0) -> float:
    """Lipschitz constant K of b for the catalog entries."""
    if b_kind == "linear_ou":
        return 1.0
    if b_kind == "scaled_linear":
        return abs(beta)
    if b_kind == "log_cosh":
        return abs(beta) + abs(kappa)
    raise PreconditionError(f"unknown b_kind '{b_kind}', expected one of {B_KINDS}")


def lipschitz_pair(drift: DriftSpec, B: np.ndarray) -> Tuple[float, float]:
    """(K1, K2) with |Z(s) - Z(s')| <= K1|x - x'| + K2|y - y'|."""
    norm_B = float(np.linalg.norm(B, 2)) if B.size else 0.0
    if isinstance(drift, LinearDrift):
        k1 = float(np.linalg.norm(drift.G, 2)) if drift.G.size else 0.0
        k2 = float(np.linalg.norm(drift.H, 2)) if drift.H.size else 0.0
        return k1, k2
    if isinstance(drift, KineticGradientDrift):
        return norm_B, catalog_lipschitz(drift.b_kind, drift.beta, drift.kappa)
    if isinstance(drift, ChainDrift):
        return 1.0, catalog_lipschitz(drift.b_kind, drift.beta)
    if isinstance(drift, GalerkinDrift):
        lam1 = float(drift.eigenvalues()[0])
        return drift.alpha * lam1 * norm_B, drift.beta * lam1
    raise PreconditionError(f"unsupported drift descriptor {type(drift).__name__}")


# --- System ---

@dataclass(frozen=True, eq=False)
class SystemSpec:
    """
    dX = (AX + BY - L1 X) dt,  dY = (Z(X, Y) - L2 Y) dt + sigma dW.
    L1 and L2 are diagonal and vanish except for Galerkin truncations.
    """

    m: int
    d: int
    A: np.ndarray
    B: np.ndarray
    sigma: np.ndarray
    drift: DriftSpec
    name: str = "custom"
    l1: Optional[np.ndarray] = None
    l2: Optional[np.ndarray] = None
    lipschitz: Tuple[float, float] = field(init=False)
    sigma_min: float = field(init=False)

    def __post_init__(self):
        if self.m < 1 or self.d < 1:
            raise PreconditionError(f"dimensions must be positive, got m={self.m}, d={self.d}")
        object.__setattr__(self, "A", frozen_array(self.A, (self.m, self.m)))
        object.__setattr__(self, "B", frozen_array(self.B, (self.m, self.d)))
        object.__setattr__(self, "sigma", frozen_array(self.sigma, (self.d, self.d)))
        l1 = np.zeros(self.m) if self.l1 is None else self.l1
        l2 = np.zeros(self.d) if self.l2 is None else self.l2
        object.__setattr__(self, "l1", frozen_array(l1, (self.m,)))
        object.__setattr__(self, "l2", frozen_array(l2, (self.d,)))
        for label, arr in (("A", self.A), ("B", self.B), ("sigma", self.sigma)):
            if not np.all(np.isfinite(arr)):
                raise PreconditionError(f"matrix {label} has non-finite entries")

        if isinstance(self.drift, LinearDrift):
            object.__setattr__(self, "drift", LinearDrift(
                G=frozen_array(self.drift.G, (self.d, self.m)),
                H=frozen_array(self.drift.H, (self.d, self.d)),
                z0=frozen_array(self.drift.z0, (self.d,)),
            ))
        elif isinstance(self.drift, KineticGradientDrift) and self.m != self.d:
            raise PreconditionError("kinetic_gradient drift needs m = d")
        elif isinstance(self.drift, ChainDrift) and self.m != self.drift.k * self.d:
            raise PreconditionError(f"chain drift needs m = k*d, got m={self.m}, k={self.drift.k}, d={self.d}")

        s = np.linalg.svd(self.sigma, compute_uv=False)
        if s[-1] <= 0.0:
            raise PreconditionError("sigma must be invertible")
        object.__setattr__(self, "sigma_min", float(s[-1]))
        object.__setattr__(self, "lipschitz", lipschitz_pair(self.drift, self.B))

    @property
    def dim(self) -> int:
        return self.m + self.d

    @property
    def norm_B(self) -> float:
        return float(np.linalg.norm(self.B, 2))

    @property
    def has_stiff_part(self) -> bool:
        return bool(np.any(self.l1) or np.any(self.l2))

    @property
    def a_eff(self) -> np.ndarray:
        """A - L1, the X-drift matrix actually seen by the dynamics."""
        return self.A - np.diag(self.l1)


@dataclass(frozen=True, eq=False)
class StatePair:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", frozen_array(np.atleast_1d(self.x)))
        object.__setattr__(self, "y", frozen_array(np.atleast_1d(self.y)))
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.y))):
            raise PreconditionError("state has non-finite entries")

    @classmethod
    def from_vector(cls, v: np.ndarray, m: int) -> "StatePair":
        v = np.asarray(v, dtype=float)
        return cls(v[:m], v[m:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.y])

    def norm_sq(self) -> float:
        return float(self.x @ self.x + self.y @ self.y)

    def norm(self) -> float:
        return float(np.sqrt(self.norm_sq()))


# --- Simulation records ---

@dataclass(frozen=True, eq=False)
class PathSample:
    """Euler path on a uniform grid; `states` rows are (x, y) concatenated."""

    grid: np.ndarray
    states: np.ndarray
    m: int
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "grid", frozen_array(self.grid))
        object.__setattr__(self, "states", frozen_array(self.states))
        if self.states.shape[0] != self.grid.shape[0]:
            raise PreconditionError("states and grid lengths differ")

    @property
    def dt(self) -> float:
        return float(self.grid[1] - self.grid[0]) if self.grid.size > 1 else 0.0

    @property
    def x(self) -> np.ndarray:
        return self.states[:, :self.m]

    @property
    def y(self) -> np.ndarray:
        return self.states[:, self.m:]

    def state(self, k: int) -> StatePair:
        return StatePair.from_vector(self.states[k], self.m)


@dataclass(frozen=True, eq=False)
class CouplingTranscript:
    """
    One realization of the control coupling. `path` starts at eta, `bar_path`
    at xi and carries the modified drift; both use the same increments.
    """

    t0: float
    control_b: np.ndarray
    path: PathSample
    bar_path: PathSample
    psi: np.ndarray
    log_weight: float
    terminal_gap: float
    c1: float

    def __post_init__(self):
        object.__setattr__(self, "control_b", frozen_array(self.control_b))
        object.__setattr__(self, "psi", frozen_array(self.psi))
        if self.psi.shape[0] != self.path.grid.shape[0] - 1:
            raise PreconditionError("psi must have one entry per step")


# --- Reports ---

@dataclass(frozen=True)
class ConditionReport:
    condition_id: str
    holds: bool
    witnesses: Dict[str, float] = field(default_factory=dict)
    notes: str = ""

    def rows(self) -> List[Tuple[str, bool, str, float]]:
        return [(self.condition_id, self.holds, name, value) for name, value in self.witnesses.items()]


@dataclass(frozen=True)
class EstimateReport:
    name: str
    value: float
    stderr: float
    n: int
    seed: int
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.stderr < 0 or not np.isfinite(self.stderr):
            raise PreconditionError(f"{self.name}: stderr must be finite and non-negative")


@dataclass(frozen=True, eq=False)
class FiniteMarkovOperator:
    """Row-stochastic P with invariant distribution mu (checked by validate_operator)."""

    P: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise PreconditionError(f"P must be square, got shape {P.shape}")
        object.__setattr__(self, "P", frozen_array(P))
        object.__setattr__(self, "mu", frozen_array(self.mu, (P.shape[0],)))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def power(self, k: int) -> "FiniteMarkovOperator":
        return FiniteMarkovOperator(np.linalg.matrix_power(self.P, k), self.mu)

    def permuted(self, order: np.ndarray) -> "FiniteMarkovOperator":
        return FiniteMarkovOperator(self.P[np.ix_(order, order)], self.mu[order])


@dataclass(frozen=True)
class NormReport:
    norm_2_gap: float
    delta: float
    bound: Optional[float]
    n_power: Optional[int]


# --- Experiments ---

@dataclass(frozen=True)
class ExperimentConfig:
    command: str
    system: Optional[Dict[str, Any]]
    params: Dict[str, Any]
    seed: int
    out: str
    threads: int = 1
