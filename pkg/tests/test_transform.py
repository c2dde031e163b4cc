import math

import numpy as np
import pytest

from purejump import DELTA, ModelError, drift_function, flip_flop, geometric_birth, yule
from purejump.feller import forward_ode
from purejump.transform import (dynkin_check, dynkin_extended_check, f_transform, transform_identity_check,
                                transformed_battery)

F_LIN = drift_function("linear", {"a": 1, "b": 1}, constant=1.0, kind="cdrift")
ONE = drift_function("constant", {"value": 1.0}, kind="cdrift")
F_GEO = drift_function("geometric", {"a": 2, "b": -1, "r": 0.5}, constant=0.5, kind="cdrift")


def test_transformed_rates_yule():
    tm = f_transform(yule(), F_LIN, 1.0, truncation=20)
    # q^f(n -> n+1) = (n+2)(n+1)/(n+1) = n+2; delta rate = c + q_n - (n+2) = 0
    targets = dict((y, r) for y, r in tm.jump_targets(3, 0.0))
    assert targets[4] == pytest.approx(5.0)
    assert tm.delta_rate(3, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert tm.total_rate(3, 0.0) == pytest.approx(5.0)


def test_identity_transform_adds_only_c_to_delta():
    tm = f_transform(flip_flop(), ONE, 0.5)
    assert tm.delta_rate(0, 0.0) == pytest.approx(0.5)
    assert tm.total_rate(1, 0.0) == pytest.approx(2.5)
    assert tm.space.index(DELTA, None) == 2


def test_transformed_rows_conserve():
    tm = f_transform(geometric_birth(), F_GEO, 0.5, truncation=15)
    arr = tm.rate_arrays(0.0, 15)
    rows = np.asarray(arr.offdiag.sum(axis=1)).ravel() + arr.exit
    assert np.allclose(rows, arr.total, rtol=1e-12)


def test_rejects_non_drift():
    bad = drift_function("linear", {"a": 1, "b": 1}, constant=0.5, kind="cdrift")
    with pytest.raises(ModelError):
        f_transform(yule(), bad, 0.5, truncation=10)
    with pytest.raises(ModelError):
        f_transform(yule(), drift_function("linear", {"a": 0, "b": 1}, constant=1.0, kind="cdrift"),
                    1.0, truncation=10)


@pytest.mark.parametrize("model,f,c,x,t,trunc", [
    (yule(), F_LIN, 1.0, 0, 1.0, 30), (flip_flop(), F_LIN, 1.0, 0, 1.0, None),
    (flip_flop(), drift_function("linear", {"a": 1, "b": 1}, constant=2.0, kind="cdrift"), 2.0, 1, 0.6, None),
    (geometric_birth(), F_GEO, 0.5, 0, 0.5, 15),
])
def test_transform_identity(model, f, c, x, t, trunc):
    res = transform_identity_check(model, f, c, 0.0, x, t, trunc)
    assert res.max_residual <= 1e-9


def test_transformed_chain_closed_form_yule():
    # q^f is pure birth at rate n+2, so it leaves 0 at rate 2
    tm = f_transform(yule(), F_LIN, 1.0, truncation=30)
    assert forward_ode(tm, 0.0, 0, 0.8).mass([0]) == pytest.approx(math.exp(-1.6), abs=1e-9)


def test_dynkin_yule_holds():
    rep = dynkin_check(yule(), F_LIN, 1.0, 0, 1.0, truncation=60)
    assert rep.holds and rep.q_f_nonexplosive == "nonexplosive" and rep.equivalence
    assert rep.lhs == pytest.approx(math.e - 1, abs=1e-4) and rep.rhs == pytest.approx(math.e - 1, abs=1e-4)


def test_dynkin_geometric_fails_with_explosive_transform():
    rep = dynkin_check(geometric_birth(), F_GEO, 0.5, 0, 2.0, truncation=40)
    assert rep.holds is False and rep.q_f_nonexplosive == "explosive" and rep.equivalence
    assert abs(rep.gap) > rep.budget


def test_dynkin_flip_flop_holds():
    f = drift_function("linear", {"a": 1, "b": 1}, constant=2.0, kind="cdrift")
    rep = dynkin_check(flip_flop(), f, 2.0, 0, 1.0)
    assert rep.holds and rep.equivalence


def test_extended_dynkin_alternating():
    g = drift_function("alternating", {"a": 1, "b": 1})
    rep = dynkin_extended_check(yule(), F_LIN, 1.0, g, 0, 1.0, truncation=60)
    assert rep.holds and rep.equivalence
    p = math.exp(-1.0)
    # E g(X_1) = p / (2 - p)^2 for the geometric law; lhs = E g - g(0)
    assert rep.lhs == pytest.approx(p / (2 - p) ** 2 - 1.0, abs=1e-6)


def test_battery_verdicts():
    tm = f_transform(yule(), F_LIN, 1.0, truncation=40)
    assert transformed_battery(tm, 0.0, 0, 1.0, [20, 40]).verdict == "nonexplosive"
    tg = f_transform(geometric_birth(), F_GEO, 0.5, truncation=40)
    assert transformed_battery(tg, 0.0, 0, 2.0, [20, 40]).verdict == "explosive"
