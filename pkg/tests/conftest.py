"""Shared fixtures and independent oracles.

Oracles never call the package's numerical routines: they use scipy's
matrix exponential, closed forms and high-precision mpmath sums.
"""

from __future__ import annotations

import math
from pathlib import Path

import mpmath as mp
import numpy as np
import pytest
from scipy.linalg import expm

ROOT = Path(__file__).resolve().parent.parent
MODELS = ROOT / "models"

# pinned before the build from the mpmath product and hypoexponential sums below
U_ORIGIN_2N = 0.209711220897553799
P_EXPLODE_BY_2 = 0.594403433320537
P_EXPLODE_BY_1 = 0.173673011788865


def geometric_product(ratio: float = 2.0, alpha: float = 1.0) -> float:
    """prod_k r^k / (r^k + alpha): E exp(-alpha t_inf) for the pure birth r^n chain."""
    with mp.workdps(40):
        return float(mp.nprod(lambda k: ratio ** k / (ratio ** k + alpha), [0, mp.inf]))


def explosion_cdf(t: float, terms: int = 45) -> float:
    """P(sum_k Exp(2^k) <= t) from the hypoexponential survival formula."""
    with mp.workdps(80):
        lam = [mp.mpf(2) ** k for k in range(terms)]
        sf = mp.mpf(0)
        for k in range(terms):
            w = mp.mpf(1)
            for j in range(terms):
                if j != k:
                    w *= lam[j] / (lam[j] - lam[k])
            sf += mp.e ** (-lam[k] * mp.mpf(t)) * w
        return float(1 - sf)


def expm_transition(rates, t: float) -> np.ndarray:
    q = np.array(rates, dtype=float)
    np.fill_diagonal(q, 0.0)
    q -= np.diag(q.sum(axis=1))
    return expm(q * t)


def flip_flop_oracle(t: float, a: float = 1.0, b: float = 2.0) -> float:
    return b / (a + b) + a / (a + b) * math.exp(-(a + b) * t)


@pytest.fixture(scope="session")
def models_dir() -> Path:
    return MODELS


# --------------------------------------------------------------------------
# acceptance summary lines


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def acceptance_line(request):
    lines = request.config._acceptance_lines

    def record(text: str):
        lines.append(text)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
