import math

import numpy as np
import pytest

from purejump import ConfigurationError, Modulation, drift_function, geometric_birth, prefix_sets, yule, zero_rate
from purejump.drift import (CERTIFIED, REFUTED, check_condition2, check_condition5, check_condition6,
                            check_condition7, clause_margin, golden_alpha, implication_audit, killed_integral,
                            stopped_drift)

V_LIN = drift_function("linear", {"a": 1, "b": 1}, constant=1.0)
AFFINE = Modulation.make("affine", b=1.0)
V_DECAY = drift_function("linear", {"a": 1, "b": 1}, time_factor={"rate": -1.0})


def test_condition5_yule_certified():
    cert = check_condition5(yule(), V_LIN, prefix_sets(), 1.0, truncation=40)
    assert cert.verdict == CERTIFIED
    # alpha V - qV = (n+1) - (n+1) = 0 everywhere
    assert cert.clause("d").worst_margin == pytest.approx(0.0, abs=1e-9)


def test_condition5_geometric_refuted_at_two():
    cert = check_condition5(geometric_birth(), V_LIN, prefix_sets(), 1.0, truncation=30)
    assert cert.verdict == REFUTED and cert.failed_clause == "d"
    x, v, margin = cert.witness
    assert (x, margin) == (2, pytest.approx(-1.0))  # 3 - 4
    assert clause_margin("cond5", geometric_birth(), V_LIN, 1.0, x, v) == margin


def test_condition2_killed_integral_closed_form():
    # Yule, V = n+1, alpha = 1: (n+1)(n+2)/(n+2) = n+1, so the margin is 0
    for n in range(5):
        assert killed_integral(yule(), V_LIN, 1.0, n, 0.0) == pytest.approx(n + 1)
    assert check_condition2(yule(), V_LIN, alpha=1.0, truncation=30).certified


def test_condition2_geometric_refuted_with_replayable_witness():
    cert = check_condition2(geometric_birth(), V_LIN, alpha=1.0, truncation=20)
    assert not cert.certified
    x, v, margin = cert.witness
    assert x == 2
    assert clause_margin("cond2", geometric_birth(), V_LIN, 1.0, x, v) == pytest.approx(margin, abs=1e-12)


def test_zero_drift_fails_growth():
    cert = check_condition5(yule(), drift_function("constant", {"value": 0.0}), alpha=1.0, truncation=10)
    assert cert.verdict == REFUTED and cert.failed_clause == "c"


def test_condition6_affine_certified():
    cert = check_condition6(yule(modulation=AFFINE), V_DECAY, lambda T: T, (1.0, 2.0), truncation=20)
    assert cert.certified
    d = cert.as_dict()
    assert d["verdict"] == CERTIFIED and d["alpha"] == {"1.0": 1.0, "2.0": 2.0}


def test_condition6_margin_closed_form():
    # V = (n+1)e^{-v}; dV/dv + qV = -(n+1)e^{-v} + (n+1)(1+v)e^{-v} = v (n+1) e^{-v}
    m = yule(modulation=AFFINE)
    for n, v in [(0, 0.5), (3, 1.0)]:
        want = 2.0 * (n + 1) * math.exp(-v) - v * (n + 1) * math.exp(-v)
        assert clause_margin("cond6", m, V_DECAY, 2.0, n, v) == pytest.approx(want, rel=1e-6)


def test_condition7_search_and_refutation():
    cert = check_condition7(yule(modulation=AFFINE), drift_function("linear", {"a": 1, "b": 1}),
                            horizons=(1.0,), truncation=15)
    assert cert.certified and ALPHA_OK(cert.alpha[1.0])
    bad = check_condition7(geometric_birth(), V_LIN, horizons=(1.0,), truncation=15)
    assert not bad.certified


def ALPHA_OK(alpha):
    return 1e-3 <= alpha <= 1e3


def test_condition7_zero_rate():
    assert check_condition7(zero_rate(), V_LIN, horizons=(1.0,), truncation=8).certified


def test_golden_alpha_finds_maximum():
    alpha, best = golden_alpha(lambda a: -(math.log(a) - 1.0) ** 2)
    assert alpha == pytest.approx(math.e, rel=1e-3) and best == pytest.approx(0.0, abs=1e-6)


def test_stopped_drift_restarts_after_horizon():
    w = stopped_drift(V_DECAY, 1.0)
    # up to T it follows V, afterwards it restarts at V(0, x)
    assert w(2, 0.5) == pytest.approx(V_DECAY(2, 0.5))
    assert w(2, 3.0) == pytest.approx(V_DECAY(2, 0.0))


def test_audit_consistent_and_skipped():
    m = yule(modulation=AFFINE)
    rep = implication_audit(m, V_DECAY, lambda T: T, (1.0,), truncation=12)
    assert not rep.skipped and rep.consistent
    bad = implication_audit(geometric_birth(), V_LIN, lambda T: 1.0, (1.0,), truncation=12)
    assert bad.skipped and bad.condition7 is None


def test_unknown_condition_rejected():
    with pytest.raises(ConfigurationError):
        clause_margin("cond9", yule(), V_LIN, 1.0, 0)
