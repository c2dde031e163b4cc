import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import P_EXPLODE_BY_1, expm_transition, flip_flop_oracle
from purejump import (ConfigurationError, Modulation, TruncationLeakError, flip_flop, geometric_birth,
                      yule, zero_rate)
from purejump.feller import (chapman_kolmogorov_check, feller_series, forward_ode, resolvent,
                             series_partial_sums, transition_curve, transition_matrix, truncation_limit)


@pytest.mark.parametrize("t", [0.1, 0.5, 1.0, 3.0])
def test_flip_flop_matches_expm(t):
    ref = expm_transition([[0, 1], [2, 0]], t)
    for x in (0, 1):
        for est in (forward_ode(flip_flop(), 0.0, x, t), feller_series(flip_flop(), 0.0, x, t)):
            assert np.allclose(est.mass_vector, ref[x], atol=1e-9)
    assert ref[0, 0] == pytest.approx(flip_flop_oracle(t), abs=1e-12)


def test_birth_death_matches_expm_with_reflection():
    # a finite birth-death chain is fully inside a truncation large enough
    from purejump import RateLaw, build_birth_death
    m = build_birth_death(RateLaw("constant", 1.5), RateLaw("linear", 0.0, 1.0), size=6)
    q = np.zeros((6, 6))
    for n in range(6):
        for y, r in m.jump_targets(n, 0.0):
            q[n, y] += r
    ref = expm_transition(q, 0.8)
    est = forward_ode(m, 0.0, 2, 0.8)
    assert np.allclose(est.mass_vector, ref[2], atol=1e-9)


def test_yule_closed_form_geometric_law():
    # Yule from 0 with rates n+1 is geometric: P(X_t = k) = e^{-t} (1 - e^{-t})^k
    t = 0.7
    est = forward_ode(yule(), 0.0, 0, t, truncation=60)
    p = math.exp(-t)
    for k in range(6):
        assert est.mass([k]) == pytest.approx(p * (1 - p) ** k, abs=1e-9)


def test_time_dependent_affine_matches_time_change():
    # rates (n+1)(1+t) are a time change of Yule by G(t) = t + t^2/2
    m = yule(modulation=Modulation.make("affine", b=1.0))
    t = 0.8
    g = t + t * t / 2
    assert forward_ode(m, 0.0, 0, t).mass([0]) == pytest.approx(math.exp(-g), abs=1e-9)
    assert feller_series(m, 0.0, 0, t, truncation=20).mass([0]) == pytest.approx(math.exp(-g), abs=1e-9)


def test_series_and_ode_agree_on_explosive_chain():
    a = forward_ode(geometric_birth(), 0.0, 0, 0.5, truncation=12)
    b = feller_series(geometric_birth(), 0.0, 0, 0.5, truncation=12)
    assert np.allclose(a.mass_vector, b.mass_vector, atol=1e-8)


def test_explosive_deficit_matches_hypoexponential():
    est = forward_ode(geometric_birth(), 0.0, 0, 1.0, truncation=40)
    assert est.mass() == pytest.approx(1 - P_EXPLODE_BY_1, abs=1e-6)


def test_partial_sums_are_nondecreasing():
    sums = series_partial_sums(flip_flop(), 0.0, 0, 1.0, [0], n_terms=8)
    assert np.all(np.diff(sums) >= -1e-14)
    assert sums[-1] <= flip_flop_oracle(1.0) + 1e-12


def test_chapman_kolmogorov():
    for m in (flip_flop(), yule(modulation=Modulation.make("periodic", b=0.5, omega=3.0))):
        res = chapman_kolmogorov_check(m, 0.0, 0.4, 1.0, 0, truncation=25)
        assert res.max_residual <= res.budget + res.outside_slack


def test_transition_matrix_rows_are_subprobabilities():
    rows, outside = transition_matrix(geometric_birth(), 0.0, 1.0, truncation=15)
    tot = rows.sum(axis=1) + outside
    assert np.all(tot <= 1 + 1e-9) and np.all(rows >= -1e-12)


def test_truncation_limit_is_monotone():
    lim = truncation_limit(geometric_birth(), 0.0, 0, 2.0, None, (5, 10, 20, 40))
    assert all(b >= a - 1e-10 for a, b in zip(lim.sequence, lim.sequence[1:]))
    assert lim.gap <= 1e-6


def test_truncation_schedule_must_increase():
    with pytest.raises(ConfigurationError):
        truncation_limit(yule(), 0.0, 0, 1.0, None, (10, 10))


def test_outside_ceiling_raises():
    with pytest.raises(TruncationLeakError):
        forward_ode(yule(), 0.0, 0, 3.0, truncation=3, outside_ceiling=1e-3)


def test_zero_rate_chain_stays_put():
    est = forward_ode(zero_rate(), 0.0, 3, 5.0)
    assert est.mass([3]) == 1.0


def test_transition_curve_endpoints():
    grid, vals = transition_curve(flip_flop(), 0.0, 0, 2.0, [0.0, 1.0, 2.0], target_set=[0])
    assert vals[0] == pytest.approx(1.0) and vals[1] == pytest.approx(flip_flop_oracle(1.0), abs=1e-9)


def test_resolvent_on_yule_truncations():
    # on S_N the Yule resolvent at alpha = 1 from 0 is 1 - 1/(N+1)
    r = resolvent(yule(), 1.0, 0.0, 0, [10, 20, 40])
    for n, val in zip(r.schedule, r.sequence):
        assert val == pytest.approx(1 - 1 / (n + 1), abs=1e-8)
    assert not r.stabilized


def test_resolvent_of_flip_flop_is_one():
    r = resolvent(flip_flop(), 1.0, 0.0, 0)
    assert r.value == pytest.approx(1.0, abs=1e-8)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(0.1, 5), b=st.floats(0.1, 5), t=st.floats(0.01, 3))
def test_flip_flop_property(a, b, t):
    est = forward_ode(flip_flop(a, b), 0.0, 0, t)
    assert est.mass([0]) == pytest.approx(flip_flop_oracle(t, a, b), abs=1e-8)
    assert est.mass() == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=10, deadline=None)
@given(n1=st.integers(3, 15), extra=st.integers(1, 15), t=st.floats(0.1, 2))
def test_truncations_increase_monotonically(n1, extra, t):
    a = forward_ode(geometric_birth(), 0.0, 0, t, truncation=n1)
    b = forward_ode(geometric_birth(), 0.0, 0, t, truncation=n1 + extra)
    assert np.all(b.mass_vector[:n1] >= a.mass_vector - 1e-10)
