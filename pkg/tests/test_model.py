import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from purejump import (DELTA, ModelError, Modulation, RateLaw, build_birth_death, drift_function,
                      flip_flop, geometric_birth, prefix_sets, validate_c_drift, validate_q_function,
                      yule, zero_rate)
from purejump.model import StateSpace, check_monotone_sets, drift_generator, prefix_frozen


def test_yule_rates_and_targets():
    m = yule()
    assert m.total_rate(3, 0.0) == pytest.approx(4.0)
    assert m.jump_targets(3, 0.0) == [(4, pytest.approx(4.0))]


def test_flip_flop_rates():
    m = flip_flop()
    assert m.total_rate(0, 0.0) == 1.0 and m.total_rate(1, 5.0) == 2.0


def test_zero_rate_has_no_jumps():
    m = zero_rate()
    assert m.total_rate(4, 1.0) == 0.0
    assert m.hazard(4, 0.0, 10.0) == 0.0


@pytest.mark.parametrize("family,params", [
    ("affine", {"b": 0.5}), ("exponential", {"b": 0.3}), ("periodic", {"b": 0.5, "omega": 2.0}),
    ("piecewise", {"breaks": [1.0, 2.0], "values": [1.0, 3.0, 0.5]}),
])
def test_modulation_primitive_matches_quadrature(family, params):
    from scipy.integrate import quad
    g = Modulation.make(family, **params)
    for s, t in [(0.0, 0.7), (0.4, 2.5), (1.5, 3.0)]:
        ref = quad(lambda u: g.value(u), s, t, points=[1.0, 2.0], limit=200)[0]
        assert g.integral(s, t) == pytest.approx(ref, rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("family,params", [
    ("periodic", {"b": 1.5}), ("piecewise", {"breaks": [1.0], "values": [1.0]}),
    ("piecewise", {"breaks": [1.0], "values": [1.0, -1.0]}), ("bogus", {}),
])
def test_bad_modulation_rejected(family, params):
    with pytest.raises(ModelError):
        Modulation.make(family, **params)


def test_rate_law_rejects_negative():
    with pytest.raises(ModelError):
        RateLaw("linear", -1.0, 1.0)
    with pytest.raises(ModelError):
        RateLaw("nope")


def test_hazard_is_integral_of_rate():
    m = yule(modulation=Modulation.make("affine", b=1.0))
    # q_2(t) = 3 (1 + t), integral over [0.5, 2] = 3 (1.5 + (4 - 0.25) / 2)
    assert m.hazard(2, 0.5, 2.0) == pytest.approx(3 * (1.5 + 3.75 / 2))


def test_state_space_truncation_and_cemeteries():
    sp = StateSpace("countable", None, 5)
    assert sp.states() == [0, 1, 2, 3, 4]
    ext = sp.with_extra(DELTA)
    assert ext.states(3)[-1] is DELTA and ext.index(DELTA, 3) == 3


def test_validate_q_function_passes_on_shipped_models():
    for m in (yule(), flip_flop(), geometric_birth(), zero_rate()):
        rep = validate_q_function(m, 10, (0.0, 1.0))
        assert rep.passed, rep.failure


def test_c_drift_validation():
    f = drift_function("linear", {"a": 1, "b": 1}, constant=1.0, kind="cdrift")
    assert validate_c_drift(yule(), f, 20, (0.0,)).passed
    # Lf(n) = (n+1) for Yule, so c = 0.5 fails at n = 0 already
    g = drift_function("linear", {"a": 1, "b": 1}, constant=0.5, kind="cdrift")
    chk = validate_c_drift(yule(), g, 20, (0.0,))
    assert not chk.passed and chk.witness is not None


def test_drift_generator_closed_form():
    f = drift_function("linear", {"a": 1, "b": 1})
    # q f(n) = (n+1) (f(n+1) - f(n)) = n + 1
    assert drift_generator(yule(), f, 4, 0.0) == pytest.approx(5.0)


def test_drift_families():
    geo = drift_function("geometric", {"a": 2, "b": -1, "r": 0.5})
    assert geo(3) == pytest.approx(2 - 0.125)
    alt = drift_function("alternating", {"a": 1, "b": 1})
    assert alt(3) == pytest.approx(-4.0) and alt(2) == pytest.approx(3.0)
    tf = drift_function("linear", {"a": 1, "b": 1}, time_factor={"rate": -1.0})
    assert tf(2, 1.0) == pytest.approx(3 * math.exp(-1.0))
    with pytest.raises(ModelError):
        drift_function("nope")


def test_prefix_sets_monotone():
    sets = prefix_sets()
    ok, witness = check_monotone_sets(sets, range(30), 20)
    assert ok and witness is None
    assert sets.contains(3, [0, 3, 4]).tolist() == [True, True, False]


def test_frozen_model_absorbs_outside_prefix():
    fr = prefix_frozen(yule(), 3)
    assert fr.total_rate(2, 0.0) > 0 and fr.total_rate(4, 0.0) == 0.0


@settings(max_examples=40, deadline=None)
@given(a=st.floats(0, 5), b=st.floats(0, 5), n=st.integers(0, 200), t=st.floats(0, 10))
def test_birth_death_rows_are_conservative(a, b, n, t):
    m = build_birth_death(RateLaw("linear", a, b), RateLaw("constant", 0.7))
    total = m.total_rate(n, t)
    assert sum(r for _, r in m.jump_targets(n, t)) == pytest.approx(total, rel=1e-12, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 40))
def test_rate_arrays_rows_match_totals(n):
    arr = geometric_birth().rate_arrays(0.0, n)
    rows = np.asarray(arr.offdiag.sum(axis=1)).ravel() + arr.exit
    assert np.allclose(rows, arr.total, rtol=1e-12)
