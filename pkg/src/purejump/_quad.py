"""Gauss-Legendre helpers shared by the quadrature-based modules."""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.polynomial import legendre

DEFAULT_NODES = 32


@lru_cache(maxsize=None)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [-1, 1]."""
    x, w = legendre.leggauss(n)
    x.flags.writeable = False
    w.flags.writeable = False
    return x, w


@lru_cache(maxsize=None)
def tail_integration_matrix(n: int) -> np.ndarray:
    """Matrix M with (M @ h)[i] ~= integral of h from node i to +1.

    Exact for polynomials of degree < n sampled at the Gauss-Legendre nodes.
    """
    x, w = gauss_legendre(n)
    k = np.arange(n)
    # Legendre coefficients of each Lagrange basis polynomial
    vander = legendre.legvander(x, n)  # P_0..P_n at the nodes
    coef = ((2 * k + 1) / 2.0)[:, None] * (vander[:, :n].T * w[None, :])
    # integral of P_k from x to 1
    tails = np.empty((n, n))
    tails[:, 0] = 1.0 - x
    for j in range(1, n):
        tails[:, j] = (vander[:, j - 1] - vander[:, j + 1]) / (2 * j + 1)
    m = tails @ coef
    m.flags.writeable = False
    return m


def panels(a: float, b: float, count: int) -> np.ndarray:
    return np.linspace(a, b, max(int(count), 1) + 1)


def panel_nodes(edges: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened nodes and weights for a composite rule over ``edges``."""
    x, w = gauss_legendre(n)
    lo = edges[:-1, None]
    half = 0.5 * np.diff(edges)[:, None]
    nodes = lo + half * (x[None, :] + 1.0)
    weights = half * w[None, :]
    return nodes.ravel(), weights.ravel()


def integrate(func, a: float, b: float, n: int = DEFAULT_NODES, pieces: int = 1) -> float:
    """Composite Gauss-Legendre integral of a vectorised ``func`` over [a, b]."""
    if b <= a:
        return 0.0
    nodes, weights = panel_nodes(panels(a, b, pieces), n)
    return float(np.dot(weights, func(nodes)))


def integrate_with_error(func, a: float, b: float, n: int = DEFAULT_NODES, pieces: int = 1):
    """Integral plus a node-doubling error estimate."""
    coarse = integrate(func, a, b, n, pieces)
    fine = integrate(func, a, b, 2 * n, pieces)
    return fine, abs(fine - coarse)
