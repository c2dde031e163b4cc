"""Machine checks of the drift (Lyapunov) nonexplosion conditions.

Each checker evaluates the clauses of one condition on a finite
verification domain (a state truncation and a grid of times) and returns a
:class:`DriftCertificate`.  Clauses that quantify over infinite sets are only
certified on that domain, and the domain is printed with every certificate.

Conditions (V is the test function, S_n the set ladder):

* ``cond5``  sum_y V(y) q(dy|x,v) <= alpha V(x)
* ``cond2``  int_0^inf sum_y V(v+t,y) q~(y|x,v+t) e^{-alpha t - H_x(v,v+t)} dt <= V(v,x)
* ``cond7``  the same integral over [0, T-v], per horizon T with alpha_T
* ``cond6``  dV/dv + sum_j q({j}|i,v) V(v,j) <= alpha_T V(v,i) on [0, T]
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .embedded import discounted_jump_integral, jump_integral_rule
from .errors import ConfigurationError, ModelError, NumericsError
from .model import (DriftFunction, JumpModel, SetSequence, StoppedModel, check_monotone_sets,
                    drift_generator, prefix_sets)

MARGIN_TOL = 1e-9
DERIVATIVE_TOL = 1e-4
ALPHA_RANGE = (1e-3, 1e3)
GOLDEN_ITERATIONS = 24
CERTIFIED = "certified-on-domain"
REFUTED = "refuted"


@dataclass(frozen=True)
class ClauseCheck:
    clause: str
    passed: bool
    worst_margin: float
    witness: tuple | None = None
    note: str = ""

    def as_dict(self) -> dict:
        return {"clause": self.clause, "passed": self.passed, "worst_margin": _num(self.worst_margin),
                "witness": _witness(self.witness), "note": self.note}


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else repr(v)


def _witness(w):
    if w is None:
        return None
    state, time, margin = w
    return {"state": state if isinstance(state, (int, np.integer)) and not isinstance(state, bool)
            else repr(state), "time": _num(time), "margin": _num(margin)}


@dataclass(frozen=True)
class DriftCertificate:
    condition: str
    model_id: str
    V: dict
    sets: dict
    alpha: object
    domain: dict
    checks: tuple

    @property
    def verdict(self) -> str:
        return CERTIFIED if all(c.passed for c in self.checks) else REFUTED

    @property
    def certified(self) -> bool:
        return self.verdict == CERTIFIED

    @property
    def witness(self):
        for c in self.checks:
            if not c.passed:
                return c.witness
        return None

    @property
    def failed_clause(self) -> str | None:
        for c in self.checks:
            if not c.passed:
                return c.clause
        return None

    def clause(self, name: str) -> ClauseCheck:
        for c in self.checks:
            if c.clause == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        alpha = self.alpha
        if isinstance(alpha, dict):
            alpha = {str(k): _num(v) for k, v in alpha.items()}
        else:
            alpha = _num(alpha)
        return {"condition": self.condition, "model_id": self.model_id, "V": self.V,
                "sets": self.sets, "alpha": alpha, "domain": self.domain,
                "checks": [c.as_dict() for c in self.checks], "verdict": self.verdict,
                "witness": _witness(self.witness)}


# --------------------------------------------------------------------------
# margins at a single point (public so witnesses can be re-evaluated)


def _v_at(V: DriftFunction, x, v: float) -> float:
    return float(V.at([x], v)[0])


def killed_integral(model: JumpModel, V: DriftFunction, alpha: float, x, v: float,
                    upper: float = math.inf) -> float:
    """int_0^upper sum_y V(v+t,y) q~(y|x,v+t) e^{-alpha t - H_x(v,v+t)} dt."""
    if upper <= 0:
        return 0.0
    if model.constant_after == 0.0 and not V.time_dependent:
        targets = model.jump_targets(x, v)
        if not targets:
            return 0.0
        q = model.total_rate(x, v)
        ys = [y for y, _ in targets]
        s = float(np.dot([r for _, r in targets], V.at(ys, v)))
        frac = 1.0 if math.isinf(upper) else -math.expm1(-(alpha + q) * upper)
        return s / (alpha + q) * frac
    try:
        val, _ = discounted_jump_integral(model, alpha, v, x, lambda t, ys: V.at(ys, t), upper)
    except NumericsError as exc:
        raise ConfigurationError(
            f"no tail closure for the discounted integral at state {x!r}, time {v}: {exc}") from exc
    return val


_RULES: dict = {}


def finite_horizon_integral(model: JumpModel, V: DriftFunction, alpha: float, x, v: float,
                            horizon: float) -> float:
    """The killed one-jump integral over [0, horizon - v].

    Closed form for homogeneous rates with time-constant V; otherwise an
    alpha-independent quadrature rule cached per (model, V, x, v, horizon),
    so line searches over alpha and witness re-evaluation agree exactly.
    """
    upper = horizon - v
    if upper <= 0:
        return 0.0
    if model.constant_after == 0.0 and not V.time_dependent:
        return killed_integral(model, V, alpha, x, v, upper)
    key = (id(model), id(V), x, float(v), float(horizon))
    rule = _RULES.get(key)
    if rule is None:
        if len(_RULES) > 200_000:
            _RULES.clear()
        rule = jump_integral_rule(model, v, x, lambda t, ys: V.at(ys, t), upper,
                                  alpha_max=ALPHA_RANGE[1])
        _RULES[key] = (rule, model, V)
    else:
        rule = rule[0]
    ts, ws = rule
    return float(np.dot(ws, np.exp(-alpha * ts)))


def clause_margin(condition: str, model: JumpModel, V: DriftFunction, alpha: float, x, v: float = 0.0,
                  horizon: float | None = None) -> float:
    """Signed margin of the inequality clause at one point (negative = violated)."""
    if condition == "cond5":
        return alpha * _v_at(V, x, v) - drift_generator(model, V, x, v)
    if condition == "cond2":
        return _v_at(V, x, v) - killed_integral(model, V, alpha, x, v)
    if condition == "cond7":
        if horizon is None:
            raise ConfigurationError("cond7 margins need a horizon")
        return _v_at(V, x, v) - finite_horizon_integral(model, V, alpha, x, v, horizon)
    if condition == "cond6":
        dv, _ = V.dv([x], v)
        return alpha * _v_at(V, x, v) - (float(dv[0]) + drift_generator(model, V, x, v))
    raise ConfigurationError(f"unknown condition {condition!r}")


# --------------------------------------------------------------------------
# clause helpers


def _states(model: JumpModel, truncation: int | None) -> list:
    model.space.require_countable("drift checks")
    n = model.space.base_count(truncation)
    return list(range(n))


def _coverage(sets: SetSequence, states: list, n_max: int) -> ClauseCheck:
    ok, bad = check_monotone_sets(sets, states, n_max)
    if not ok:
        n, x = bad
        return ClauseCheck("a", False, -1.0, (x, None, -1.0), f"S_{n} not contained in S_{n + 1}")
    inside = sets.contains(n_max, states)
    if not inside.all():
        x = states[int(np.nonzero(~inside)[0][0])]
        return ClauseCheck("a", False, -1.0, (x, None, -1.0), f"state not covered by S_{n_max}")
    return ClauseCheck("a", True, 0.0, None, f"S_n monotone and covering the truncation by n={n_max}")


def _rate_bounds(model: JumpModel, sets: SetSequence, states: list, n_max: int,
                 window: Callable[[int], float], clause: str = "b") -> ClauseCheck:
    worst = 0.0
    for n in range(n_max + 1):
        members = [x for x, m in zip(states, sets.contains(n, states)) if m]
        hi = window(n)
        for x in members:
            r = model.rate_sup(x, 0.0, hi)
            if not math.isfinite(r):
                return ClauseCheck(clause, False, -math.inf, (x, hi, -math.inf),
                                   f"unbounded rate on S_{n}")
            worst = max(worst, r)
    return ClauseCheck(clause, True, 0.0, None, f"max rate over the ladder {worst:.6g}")


def _growth(V: DriftFunction, sets: SetSequence, states: list, n_max: int,
            times: Sequence[float], clause: str = "c",
            ladder: Callable[[int], float] | None = None) -> ClauseCheck:
    """min of V outside S_n must never decrease and must actually grow.

    Without an explicit ``ladder`` the minimum has to rise by at least
    1e-6 + 0.1% of its first value across the domain.
    """
    values = np.stack([V.at(states, float(v)) for v in times])        # (T, N)
    mins, argmins = [], []
    for n in range(n_max):
        outside = ~sets.contains(n, states)
        if sets.window is not None:
            w = sets.time_window(n)
            block = np.where(outside[None, :] | (np.asarray(times)[:, None] > w), values, np.inf)
        else:
            block = np.where(outside[None, :], values, np.inf)
        if not np.isfinite(block).any():
            break
        k = int(np.argmin(block))
        mins.append(float(block.ravel()[k]))
        argmins.append((states[k % len(states)], float(times[k // len(states)])))
    if len(mins) < 2:
        return ClauseCheck(clause, False, -math.inf, None, "domain too small to observe growth")
    drops = np.diff(mins)
    j = int(np.argmin(drops))
    if drops[j] < -MARGIN_TOL:
        x, t = argmins[j + 1]
        return ClauseCheck(clause, False, float(drops[j]), (x, t, float(drops[j])),
                           f"min of V outside S_n decreased at n={j + 1}")
    if ladder is not None:
        gaps = [m - ladder(n) for n, m in enumerate(mins)]
        k = int(np.argmin(gaps))
        if gaps[k] < -MARGIN_TOL:
            x, t = argmins[k]
            return ClauseCheck(clause, False, float(gaps[k]), (x, t, float(gaps[k])),
                               f"below the declared ladder at n={k}")
        return ClauseCheck(clause, True, float(min(gaps)), None,
                           f"min V outside S_n rises {mins[0]:.6g} -> {mins[-1]:.6g}")
    need = 1e-6 + 1e-3 * abs(mins[0])
    margin = mins[-1] - mins[0] - need
    if margin < 0:
        x, t = argmins[-1]
        return ClauseCheck(clause, False, float(margin), (x, t, float(margin)),
                           "min of V outside S_n does not grow on the domain")
    return ClauseCheck(clause, True, float(margin), None,
                       f"min V outside S_n rises {mins[0]:.6g} -> {mins[-1]:.6g}")


def _sweep(points, margin_fn, clause: str, note: str = "") -> ClauseCheck:
    worst = math.inf
    witness = None
    for x, v in points:
        m = margin_fn(x, v)
        if m < worst:
            worst = m
        if witness is None and m < -MARGIN_TOL:
            witness = (x, v, m)
    return ClauseCheck(clause, witness is None, float(worst), witness, note)


def _require_nonnegative(V: DriftFunction, states, times):
    for v in times:
        vals = V.at(states, float(v))
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ModelError("test function V must be finite and nonnegative on the domain")


def _domain(truncation, times, n_max, **extra) -> dict:
    d = {"states": f"0..{truncation - 1}", "truncation": int(truncation),
         "time_samples": [float(t) for t in times], "ladder_depth": int(n_max)}
    d.update(extra)
    return d


def _ladder_depth(states, sets: SetSequence) -> int:
    """Largest n whose S_n still leaves part of the truncation outside."""
    n = 0
    while n < len(states) and not sets.contains(n, states).all():
        n += 1
    return max(n, 1)


# --------------------------------------------------------------------------
# conditions


def check_condition5(model: JumpModel, V: DriftFunction, sets: SetSequence | None = None,
                     alpha: float | None = None, truncation: int | None = None,
                     time_samples: Sequence[float] = (0.0,),
                     ladder: Callable[[int], float] | None = None) -> DriftCertificate:
    """Generator inequality sum_y V(y) q(dy|x,v) <= alpha V(x) plus clauses (a)-(c)."""
    sets = sets or prefix_sets()
    alpha = V.constant if alpha is None else float(alpha)
    states = _states(model, truncation)
    _require_nonnegative(V, states, time_samples)
    n_max = _ladder_depth(states, sets)
    checks = (
        _coverage(sets, states, n_max),
        _rate_bounds(model, sets, states, n_max, lambda n: math.inf),
        _growth(V, sets, states, n_max, time_samples, ladder=ladder),
        _sweep([(x, float(v)) for x in states for v in time_samples],
               lambda x, v: clause_margin("cond5", model, V, alpha, x, v), "d",
               "alpha V(x) - sum_y V(y) q(dy|x,v)"),
    )
    return DriftCertificate("cond5", model.name, V.describe(), sets.describe(), alpha,
                            _domain(len(states), time_samples, n_max), checks)


def check_condition2(model: JumpModel, V: DriftFunction, sets: SetSequence | None = None,
                     alpha: float | None = None, truncation: int | None = None,
                     time_samples: Sequence[float] = (0.0,),
                     ladder: Callable[[int], float] | None = None) -> DriftCertificate:
    """Killed one-jump inequality over the infinite horizon plus clauses (a)-(c)."""
    sets = sets or prefix_sets()
    alpha = V.constant if alpha is None else float(alpha)
    if not alpha > 0:
        raise ConfigurationError("condition 2 needs alpha > 0")
    states = _states(model, truncation)
    _require_nonnegative(V, states, time_samples)
    n_max = _ladder_depth(states, sets)
    checks = (
        _coverage(sets, states, n_max),
        _rate_bounds(model, sets, states, n_max, sets.time_window),
        _growth(V, sets, states, n_max, time_samples, ladder=ladder),
        _sweep([(x, float(v)) for x in states for v in time_samples],
               lambda x, v: clause_margin("cond2", model, V, alpha, x, v), "d",
               "V(v,x) - killed one-jump expectation of V"),
    )
    return DriftCertificate("cond2", model.name, V.describe(), sets.describe(), alpha,
                            _domain(len(states), time_samples, n_max), checks)


def _time_grid(T: float, points: int) -> list:
    return [float(t) for t in np.linspace(0.0, T, max(2, int(points)))]


def golden_alpha(margin_of_alpha: Callable[[float], float], lo: float = ALPHA_RANGE[0],
                 hi: float = ALPHA_RANGE[1], iterations: int = GOLDEN_ITERATIONS) -> tuple[float, float]:
    """Golden-section search over log(alpha) maximising the worst margin."""
    a, b = math.log(lo), math.log(hi)
    ratio = (math.sqrt(5) - 1) / 2
    c = b - ratio * (b - a)
    d = a + ratio * (b - a)
    fc = margin_of_alpha(math.exp(c))
    fd = margin_of_alpha(math.exp(d))
    for _ in range(iterations):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = margin_of_alpha(math.exp(c))
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = margin_of_alpha(math.exp(d))
    ends = [(margin_of_alpha(lo), lo), (margin_of_alpha(hi), hi), (fc, math.exp(c)), (fd, math.exp(d))]
    best = max(ends, key=lambda p: p[0])
    return best[1], best[0]


def check_condition7(model: JumpModel, V: DriftFunction, sets: SetSequence | None = None,
                     alpha_of_T: Callable[[float], float] | None = None,
                     horizons: Sequence[float] = (1.0,), truncation: int | None = None,
                     time_points: int = 11, ladder=None) -> DriftCertificate:
    """Finite-horizon killed inequality, one alpha_T per horizon.

    Without ``alpha_of_T`` each alpha_T is chosen by golden-section search.
    """
    sets = sets or prefix_sets()
    states = _states(model, truncation)
    n_max = _ladder_depth(states, sets)
    checks = [_coverage(sets, states, n_max)]
    alphas = {}
    for T in horizons:
        T = float(T)
        if not (T > 0 and math.isfinite(T)):
            raise ConfigurationError("condition 7 horizons must be finite and positive")
        times = _time_grid(T, time_points)
        _require_nonnegative(V, states, times)
        points = [(x, v) for x in states for v in times]

        def worst(alpha, points=points, T=T):
            return min(clause_margin("cond7", model, V, alpha, x, v, T) for x, v in points)

        if alpha_of_T is None:
            alpha, _ = golden_alpha(worst)
        else:
            alpha = float(alpha_of_T(T))
        alphas[T] = alpha
        checks.append(_rate_bounds(model, sets, states, n_max, lambda n, T=T: T, clause=f"T={T:g}:c"))
        checks.append(_growth(V, sets, states, n_max, times, clause=f"T={T:g}:b", ladder=ladder))
        checks.append(_sweep(points, lambda x, v, a=alpha, T=T: clause_margin("cond7", model, V, a, x, v, T),
                             f"T={T:g}:d", f"alpha_T={alpha:.6g}"))
    return DriftCertificate("cond7", model.name, V.describe(), sets.describe(), alphas,
                            _domain(len(states), sorted({t for T in horizons for t in _time_grid(T, time_points)}),
                                    n_max, horizons=[float(T) for T in horizons]), tuple(checks))


def check_condition6(model: JumpModel, V: DriftFunction, alpha_of_T: Callable[[float], float] | None = None,
                     horizons: Sequence[float] = (1.0,), truncation: int | None = None,
                     sets: SetSequence | None = None, time_points: int = 11,
                     ladder=None) -> DriftCertificate:
    """Differential inequality dV/dv + LV <= alpha_T V on [0, T] x truncation.

    The time derivative is analytic when V supplies one (cross-checked by
    central differences) or central differences at 1e-5 against 2e-5.
    """
    sets = sets or prefix_sets()
    states = _states(model, truncation)
    n_max = _ladder_depth(states, sets)
    checks = []
    alphas = {}
    for T in horizons:
        T = float(T)
        times = _time_grid(T, time_points)
        _require_nonnegative(V, states, times)
        disagreement = max(V.dv(states, v)[1] for v in times)
        if disagreement > DERIVATIVE_TOL:
            raise ModelError(f"time derivative of V fails its cross-check ({disagreement:.3e} > "
                             f"{DERIVATIVE_TOL}); check the supplied derivative")
        checks.append(ClauseCheck(f"T={T:g}:i", True, -disagreement, None,
                                  f"derivative cross-check {disagreement:.2e}"))
        # (ii) sum_j q~(j|i,v) |V(v,j)| finite on the domain
        worst = 0.0
        bad = None
        for x in states:
            for v in times:
                targets = model.jump_targets(x, v)
                if targets:
                    s = float(np.dot([r for _, r in targets], np.abs(V.at([y for y, _ in targets], v))))
                    if not math.isfinite(s):
                        bad = (x, v, -math.inf)
                        break
                    worst = max(worst, s)
            if bad:
                break
        checks.append(ClauseCheck(f"T={T:g}:ii", bad is None, 0.0 if bad is None else -math.inf, bad,
                                  f"max sum q~|V| = {worst:.6g}"))
        checks.append(_growth(V, sets, states, n_max, times, clause=f"T={T:g}:iii", ladder=ladder))
        points = [(x, v) for x in states for v in times]
        if alpha_of_T is None:
            alpha, _ = golden_alpha(lambda a: min(clause_margin("cond6", model, V, a, x, v) for x, v in points))
        else:
            alpha = float(alpha_of_T(T))
        alphas[T] = alpha
        checks.append(_sweep(points, lambda x, v, a=alpha: clause_margin("cond6", model, V, a, x, v),
                             f"T={T:g}:iv", f"alpha_T={alpha:.6g}"))
    return DriftCertificate("cond6", model.name, V.describe(), sets.describe(), alphas,
                            _domain(len(states), sorted({t for T in horizons for t in _time_grid(T, time_points)}),
                                    n_max, horizons=[float(T) for T in horizons]), tuple(checks))


# --------------------------------------------------------------------------
# implication audit


def stopped_drift(V: DriftFunction, T: float) -> DriftFunction:
    """V_T(v,x) = V(v,x) for v <= T and V(0,x) afterwards (for the stopped model)."""
    def value(x, v=0.0):
        return V.value(x, v) if v <= T else V.value(x, 0.0)
    label = dict(V.describe())
    label["stopped_at"] = T
    return DriftFunction(value, V.constant, V.kind, None, V.time_dependent, None, label)


@dataclass(frozen=True)
class AuditReport:
    skipped: bool
    condition6: DriftCertificate
    condition2: dict
    condition7: DriftCertificate | None
    consistent: bool | None
    note: str

    def as_dict(self) -> dict:
        return {"skipped": self.skipped, "consistent": self.consistent, "note": self.note,
                "condition6": self.condition6.as_dict(),
                "condition2": {str(k): c.as_dict() for k, c in self.condition2.items()},
                "condition7": None if self.condition7 is None else self.condition7.as_dict()}


def implication_audit(model: JumpModel, V: DriftFunction, alpha_of_T: Callable[[float], float] | None,
                      horizons: Sequence[float] = (1.0, 2.0), truncation: int | None = None,
                      sets: SetSequence | None = None, time_points: int = 11) -> AuditReport:
    """Condition 6 should imply Conditions 2 and 7 with the same inputs.

    Condition 7 is checked on the model with alpha_T.  Condition 2 is checked,
    per horizon, on the model stopped at T (rates switched off afterwards)
    with V_T and alpha_T; nonexplosion of every stopped model is what
    Condition 2 delivers for the original one.  A Condition-6 refutation
    skips the audit.
    """
    sets = sets or prefix_sets()
    c6 = check_condition6(model, V, alpha_of_T, horizons, truncation, sets, time_points)
    if not c6.certified:
        return AuditReport(True, c6, {}, None, None, "condition 6 refuted; audit precondition not met")
    alphas = c6.alpha
    c7 = check_condition7(model, V, sets, lambda T: alphas[float(T)], horizons, truncation, time_points)
    c2 = {}
    for T in horizons:
        T = float(T)
        stopped = StoppedModel(model, T)
        times = _time_grid(T, time_points) + [T + 1.0]
        c2[T] = check_condition2(stopped, stopped_drift(V, T), sets, alphas[T], truncation, times)
    ok = c7.certified and all(c.certified for c in c2.values())
    note = "conditions 2 and 7 certified as implied" if ok else \
        "implication violated on the domain: report as a bug"
    return AuditReport(False, c6, c2, c7, ok, note)
