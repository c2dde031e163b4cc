"""Acceptance criteria 1-10, one pass/fail line each.

Run under pytest (lines appear in the "acceptance criteria" summary
section) or directly with ``python tests/test_acceptance.py``.
"""

from __future__ import annotations

import io
import json
import math
import sys
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from conftest import (MODELS, P_EXPLODE_BY_2, U_ORIGIN_2N, explosion_cdf, expm_transition,  # noqa: E402
                      geometric_product)

from purejump import (DriftFunction, Modulation, drift_function, flip_flop, geometric_birth,  # noqa: E402
                      prefix_sets, yule, zero_rate)
from purejump.cli import run  # noqa: E402
from purejump.drift import (check_condition5, check_condition6, clause_margin,  # noqa: E402
                            implication_audit)
from purejump.embedded import build_kernel, maximal_U, value_iterate_minimal  # noqa: E402
from purejump.feller import feller_series, forward_ode, resolvent, truncation_limit  # noqa: E402
from purejump.simulate import explosion_probability, mc_resolvent  # noqa: E402
from purejump.transform import dynkin_check, transform_identity_check  # noqa: E402


def _timed(fn):
    start = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - start


def criterion_1():
    """Flip-flop P(0,0,1,{0}) by both constructions against the matrix exponential."""
    def work():
        oracle = expm_transition([[0, 1], [2, 0]], 1.0)[0, 0]
        ode = forward_ode(flip_flop(), 0.0, 0, 1.0).mass([0])
        ser = feller_series(flip_flop(), 0.0, 0, 1.0).mass([0])
        return oracle, ode, ser
    (oracle, ode, ser), dt = _timed(work)
    closed = 2 / 3 + math.exp(-3) / 3
    ok = abs(oracle - closed) < 1e-12 and abs(ode - oracle) <= 1e-6 and abs(ser - oracle) <= 1e-6 and dt < 1
    return ok, f"ode {ode:.12f} series {ser:.12f} oracle {oracle:.12f} ({dt:.2f}s < 1s)"


def criterion_2():
    """Yule P(0,0,t,{0}) = e^{-t}."""
    def work():
        return [(t, forward_ode(yule(), 0.0, 0, t).mass([0]), feller_series(yule(), 0.0, 0, t).mass([0]))
                for t in (0.5, 1.0, 2.0)]
    rows, dt = _timed(work)
    err = max(max(abs(a - math.exp(-t)), abs(b - math.exp(-t))) for t, a, b in rows)
    return err <= 1e-8 and dt < 1, f"max error {err:.2e} over t in {{0.5,1,2}} ({dt:.2f}s < 1s)"


def criterion_3():
    """2^n chain: maximal U(0,0), quadrature resolvent and Monte Carlo resolvent."""
    def work():
        v = maximal_U(build_kernel(geometric_birth(), 1.0, None, 40))
        r = resolvent(geometric_birth(), 1.0, 0.0, 0)
        m = mc_resolvent(geometric_birth(), 1.0, 0, paths=100_000, base_seed=3, jump_cap=1000)
        return v, r, m
    (v, r, m), dt = _timed(work)
    oracle = geometric_product()
    u0 = 1.0 - v.W_at_origin
    target = 1.0 - U_ORIGIN_2N
    ok_u = abs(oracle - U_ORIGIN_2N) < 1e-10 and abs(u0 - oracle) <= 1e-3 and v.verdict == "explosive"
    ok_r = abs(r.value - target) <= r.error_budget
    ok_m = abs(m.estimate - target) <= 3 * m.stderr + m.unresolved_bias_bound
    ok = ok_u and ok_r and ok_m and dt < 60
    return ok, (f"U(0,0) {u0:.8f} vs {oracle:.8f}; resolvent {r.value:.8f}+-{r.error_budget:.1e}; "
                f"MC {m.estimate:.5f}+-{3 * m.stderr:.5f} vs {target:.8f} ({dt:.1f}s < 60s)")


def criterion_4():
    """P(t_inf <= 2) by simulation against the hypoexponential sum."""
    est, dt = _timed(lambda: explosion_probability(geometric_birth(), 0, 2.0, 100_000, 1000, base_seed=11))
    oracle = explosion_cdf(2.0)
    ok = (abs(oracle - P_EXPLODE_BY_2) < 1e-12 and abs(est.estimate - oracle) <= 3 * est.stderr
          and est.cap_sensitivity_ok and dt < 60)
    return ok, (f"estimate {est.estimate:.5f}+-{est.stderr:.5f} vs {oracle:.9f}; cap diagnostic "
                f"{'passed' if est.cap_sensitivity_ok else 'failed'} ({dt:.1f}s < 60s)")


def criterion_5():
    """Truncation sequences on the 2^n chain are nondecreasing and settle."""
    def work():
        return [truncation_limit(geometric_birth(), 0.0, 0, 2.0, target) for target in (None, [0], [1], [3])]
    lims, dt = _timed(work)
    worst = max(lim.worst_violation for lim in lims)
    gap = lims[0].gap
    ok = worst <= 1e-10 and gap <= 1e-6 and dt < 10
    return ok, (f"schedule {list(lims[0].schedule)}: worst decrease {worst:.1e}, final gap {gap:.1e} "
                f"({dt:.1f}s < 10s)")


def criterion_6():
    """Drift certificates: condition 5 (Yule certified, 2^n refuted at n=2) and condition 6 plus audit."""
    def work():
        V = drift_function("linear", {"a": 1, "b": 1}, constant=1.0)
        c5_yule = check_condition5(yule(), V, prefix_sets(), 1.0, truncation=40)
        c5_geo = check_condition5(geometric_birth(), V, prefix_sets(), 1.0, truncation=30)
        model = yule(modulation=Modulation.make("affine", b=1.0))
        W = drift_function("linear", {"a": 1, "b": 1}, time_factor={"rate": -1.0})
        c6 = check_condition6(model, W, lambda T: T, (1.0, 2.0), truncation=20)
        audit = implication_audit(model, W, lambda T: T, (1.0, 2.0), truncation=20)
        return V, c5_yule, c5_geo, c6, audit
    (V, c5_yule, c5_geo, c6, audit), dt = _timed(work)
    wit = c5_geo.witness
    replay = clause_margin("cond5", geometric_birth(), V, 1.0, wit[0], wit[1]) if wit else None
    ok = (c5_yule.certified and c5_yule.clause("d").worst_margin >= -1e-9
          and not c5_geo.certified and wit[0] == 2 and replay == wit[2]
          and c6.certified and not audit.skipped and audit.consistent
          and audit.condition7.certified and all(c.certified for c in audit.condition2.values())
          and dt < 30)
    return ok, (f"cond5 Yule {c5_yule.verdict}; cond5 2^n refuted at n={wit[0]} (margin {wit[2]:g}); "
                f"cond6 {c6.verdict}; audit cond2/cond7 {'certified' if audit.consistent else 'NOT certified'} "
                f"({dt:.1f}s < 30s)")


def criterion_7():
    """Dynkin's formula against nonexplosion of the f-transform, both directions."""
    def work():
        f = drift_function("linear", {"a": 1, "b": 1}, constant=1.0, kind="cdrift")
        good = dynkin_check(yule(), f, 1.0, 0, 1.0, truncation=60)
        g = drift_function("geometric", {"a": 2, "b": -1, "r": 0.5}, constant=0.5, kind="cdrift")
        bad = dynkin_check(geometric_birth(), g, 0.5, 0, 2.0, truncation=40)
        return good, bad
    (good, bad), dt = _timed(work)
    e1 = math.e - 1
    ok = (abs(good.lhs - e1) <= 1e-4 and abs(good.rhs - e1) <= 1e-4 and good.holds
          and good.q_f_nonexplosive == "nonexplosive" and good.equivalence
          and bad.holds is False and abs(bad.gap) > bad.budget and bad.q_f_nonexplosive == "explosive"
          and bad.equivalence and dt < 120)
    return ok, (f"Yule lhs {good.lhs:.6f} rhs {good.rhs:.6f} q^f {good.q_f_nonexplosive}; "
                f"2^n gap {bad.gap:.4f} vs budget {bad.budget:.1e} q^f {bad.q_f_nonexplosive}; "
                f"equivalence holds on both ({dt:.1f}s < 120s)")


def criterion_8():
    """Transform identity on singletons."""
    def work():
        lin = drift_function("linear", {"a": 1, "b": 1}, constant=1.0, kind="cdrift")
        one = drift_function("constant", {"value": 1.0}, kind="cdrift")
        r1 = transform_identity_check(yule(), lin, 1.0, 0.0, 0, 1.0, 30)
        r2 = transform_identity_check(flip_flop(), lin, 1.0, 0.0, 0, 1.0)
        r3 = transform_identity_check(yule(), one, 0.0, 0.0, 0, 1.0, 30)
        r4 = transform_identity_check(flip_flop(), one, 0.0, 0.0, 1, 0.7)
        return r1, r2, r3, r4
    (r1, r2, r3, r4), dt = _timed(work)
    ok = max(r1.max_residual, r2.max_residual) <= 1e-6 and max(r3.max_residual, r4.max_residual) <= 1e-10 \
        and dt < 10
    return ok, (f"Yule/flip-flop residual {max(r1.max_residual, r2.max_residual):.1e}; identity transform "
                f"{max(r3.max_residual, r4.max_residual):.1e} ({dt:.1f}s < 10s)")


SHIPPED_HOMOGENEOUS = (("yule", yule, 50), ("flip-flop", flip_flop, 2), ("zero-rate", zero_rate, 10),
                       ("birth-2^n", geometric_birth, 30))


def criterion_9():
    """Value iteration W(0,x) against the quadrature resolvent on every shipped homogeneous model."""
    def work():
        worst = 0.0
        for _, make, n in SHIPPED_HOMOGENEOUS:
            model = make()
            w = value_iterate_minimal(build_kernel(model, 1.0, None, n))
            for x in range(min(n, 4)):
                r = resolvent(model, 1.0, 0.0, x, [n])
                worst = max(worst, abs(w.at(0.0, x) - r.value))
        return worst
    worst, dt = _timed(work)
    return worst <= 1e-3 and dt < 30, f"max |W - resolvent| {worst:.1e} on {len(SHIPPED_HOMOGENEOUS)} models ({dt:.1f}s < 30s)"


def _cli(argv) -> tuple[int, bytes]:
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = run(argv)
    return code, buf.getvalue().encode()


def criterion_10():
    """Monte Carlo reports are byte-identical across reruns and thread counts."""
    model = str(MODELS / "birth2n.json")
    runs = {
        "explosion-prob": ["explosion-prob", "--model", model, "--paths", "100000", "--jump-cap", "1000",
                           "--horizon", "2", "--seed", "11", "--no-timing"],
        "resolvent-mc": ["resolvent", "--model", model, "--method", "mc", "--paths", "100000",
                         "--jump-cap", "1000", "--seed", "3", "--no-timing"],
    }
    identical = True
    for argv in runs.values():
        outs = {_cli(argv + ["--threads", str(k)]) for k in (1, 4)} | {_cli(argv + ["--threads", "1"])}
        identical &= len(outs) == 1
    a = explosion_probability(geometric_birth(), 0, 2.0, 20_000, 1000, base_seed=5, threads=1).as_dict()
    b = explosion_probability(geometric_birth(), 0, 2.0, 20_000, 1000, base_seed=5, threads=3).as_dict()
    identical &= json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    return identical, "CLI and library reports identical for threads 1 and 4 and on rerun"


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


def _line(k: int, ok: bool, detail: str) -> str:
    return f"CRITERION {k}: {'PASS' if ok else 'FAIL'} {detail}"


@pytest.mark.parametrize("k", range(1, 11))
def test_acceptance(k, acceptance_line):
    try:
        ok, detail = CRITERIA[k - 1]()
    except Exception as exc:  # a crash is a failing criterion, reported as such
        ok, detail = False, f"raised {type(exc).__name__}: {exc}"
    line = _line(k, ok, detail)
    acceptance_line(line)
    print(line)
    assert ok, line


if __name__ == "__main__":
    failures = 0
    for k, crit in enumerate(CRITERIA, start=1):
        try:
            ok, detail = crit()
        except Exception as exc:
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        failures += not ok
        print(_line(k, ok, detail), flush=True)
    sys.exit(1 if failures else 0)
