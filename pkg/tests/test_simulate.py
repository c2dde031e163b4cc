import json
import math

import numpy as np
import pytest
from scipy import stats

from conftest import P_EXPLODE_BY_1, explosion_cdf, flip_flop_oracle
from purejump import Modulation, flip_flop, geometric_birth, yule, zero_rate
from purejump.simulate import (explosion_probability, mc_resolvent, occupation, path_rng,
                               sample_path, sample_paths, sample_sojourn)


def test_path_streams_are_keyed_by_seed_and_index():
    a = path_rng(7, 3).random(4)
    assert np.array_equal(a, path_rng(7, 3).random(4))
    assert not np.array_equal(a, path_rng(7, 4).random(4))


def test_sojourn_law_time_dependent():
    # q_0(t) = 1 + t from s = 0.5: P(tau > u) = exp(-(u + u^2/2 + 0.5 u))
    m = yule(modulation=Modulation.make("affine", b=1.0))
    rng = np.random.default_rng(1)
    draws = np.array([sample_sojourn(m, 0, 0.5, rng) for _ in range(3000)])

    def cdf(u):
        return 1 - np.exp(-(u + 0.5 * u * u + 0.5 * u))
    assert stats.kstest(draws, cdf).pvalue > 1e-3


def test_thinning_and_inversion_agree_in_law():
    m = yule(modulation=Modulation.make("periodic", b=0.5, omega=2.0))
    rng = np.random.default_rng(2)
    inv = [sample_sojourn(m, 1, 0.0, rng, "inversion") for _ in range(2000)]
    thin = [sample_sojourn(m, 1, 0.0, rng, "thinning") for _ in range(2000)]
    assert stats.ks_2samp(inv, thin).pvalue > 1e-3


def test_zero_rate_path_is_absorbed():
    tr = sample_path(zero_rate(), 2, 5.0, rng=np.random.default_rng(0))
    assert tr.n_jumps == 0 and not tr.explosion_flag


def test_trajectory_is_increasing():
    tr = sample_path(yule(), 0, 2.0, rng=np.random.default_rng(3))
    assert np.all(np.diff(tr.times) > 0)
    assert list(tr.states) == list(range(len(tr.states)))


def test_explosion_estimate_and_times_cdf():
    est = explosion_probability(geometric_birth(), 0, 2.0, 20_000, 500, base_seed=4)
    assert abs(est.estimate - explosion_cdf(2.0)) <= 3 * est.stderr
    emp = est.cdf([1.0])[0]
    assert abs(emp - P_EXPLODE_BY_1) <= 3 * math.sqrt(P_EXPLODE_BY_1 * (1 - P_EXPLODE_BY_1) / est.paths)


def test_nonexplosive_chain_never_explodes():
    est = explosion_probability(yule(), 0, 2.0, 2000, 5000, base_seed=1)
    assert est.estimate == 0.0 and est.capped == 0


def test_reproducible_across_threads():
    a = explosion_probability(geometric_birth(), 0, 2.0, 5000, 300, base_seed=9, threads=1)
    b = explosion_probability(geometric_birth(), 0, 2.0, 5000, 300, base_seed=9, threads=4)
    assert json.dumps(a.as_dict(), sort_keys=True) == json.dumps(b.as_dict(), sort_keys=True)
    r1 = mc_resolvent(geometric_birth(), 1.0, 0, 3000, base_seed=2, jump_cap=300, threads=1)
    r2 = mc_resolvent(geometric_birth(), 1.0, 0, 3000, base_seed=2, jump_cap=300, threads=3)
    assert r1.as_dict() == r2.as_dict()


def test_prefix_of_paths_is_stable_under_path_count():
    short = sample_paths(flip_flop(), 0, 1.0, 5, base_seed=6)
    long = sample_paths(flip_flop(), 0, 1.0, 50, base_seed=6)
    for a, b in zip(short, long):
        assert np.array_equal(a.times, b.times) and list(a.states) == list(b.states)


def test_occupation_matches_closed_form():
    occ = occupation(flip_flop(), 0, 1.0, [0, 1], paths=20_000, base_seed=5)
    assert abs(occ.estimate[0] - flip_flop_oracle(1.0)) <= 4 * occ.stderr[0]


def test_mc_resolvent_nonexplosive_is_one():
    r = mc_resolvent(flip_flop(), 1.0, 0, 500, base_seed=1, jump_cap=10_000)
    assert r.estimate == 1.0 and r.exploded == 0
