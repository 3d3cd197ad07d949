# utils/linalg.py
"""
Small linear-algebra helpers shared by the services.
Matrix exponentials come from scipy (scaling-and-squaring, Pade order 13);
time integrals use composite Gauss-Legendre quadrature with panel doubling.
"""

import logging
from typing import Callable, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.linalg import expm, svdvals

from errors import QuadratureError

logger = logging.getLogger(__name__)

# Nodes per panel; panels double until the result settles.
GL_ORDER = 16
QUADRATURE_RTOL = 1e-10
MAX_QUADRATURE_NODES = 2 ** 14

_GL_NODES, _GL_WEIGHTS = leggauss(GL_ORDER)


def expm_batch(A: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Return e^{tA} for every t in `times`, stacked along the first axis."""
    times = np.asarray(times, dtype=float)
    return expm(times[:, None, None] * A[None, :, :])


def panel_nodes(t0: float, t1: float, panels: int) -> Tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on [t0, t1]."""
    edges = np.linspace(t0, t1, panels + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * _GL_NODES[None, :]).ravel()
    weights = (half[:, None] * _GL_WEIGHTS[None, :]).ravel()
    return nodes, weights


def integrate(integrand: Callable[[np.ndarray], np.ndarray], t0: float, t1: float) -> np.ndarray:
    """
    Integrate an array-valued function of time over [t0, t1].

    `integrand` receives a vector of nodes and returns an array whose first
    axis runs over the nodes. Panels double until the relative Frobenius
    change between two refinements drops below QUADRATURE_RTOL.
    """
    if t1 == t0:
        return np.zeros_like(integrand(np.array([t0]))[0])
    panels = 1
    previous = None
    while panels * GL_ORDER <= MAX_QUADRATURE_NODES:
        nodes, weights = panel_nodes(t0, t1, panels)
        values = integrand(nodes)
        current = np.tensordot(weights, values, axes=(0, 0))
        if previous is not None:
            scale = max(np.linalg.norm(current), np.finfo(float).tiny)
            if np.linalg.norm(current - previous) / scale < QUADRATURE_RTOL:
                return current
        previous = current
        panels *= 2
    logger.error(f"Quadrature on [{t0}, {t1}] did not settle within {MAX_QUADRATURE_NODES} nodes")
    raise QuadratureError(f"quadrature did not converge within {MAX_QUADRATURE_NODES} nodes")


def numerical_rank(M: np.ndarray) -> Tuple[int, np.ndarray]:
    """Rank from singular values with threshold max(shape) * eps * s_max."""
    s = svdvals(M)
    if s.size == 0:
        return 0, s
    tol = max(M.shape) * np.finfo(float).eps * s[0]
    return int(np.sum(s > tol)), s


def operator_norm(M: np.ndarray) -> float:
    if M.size == 0:
        return 0.0
    return float(svdvals(M)[0])


def sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)
