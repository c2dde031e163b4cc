"""The f-transform of a Q-function and Dynkin's-formula verification.

Given a c-drift function f (strictly positive, sum_y f(y) q(dy|x,s) <= c f(x)),
the transformed kernel lives on S plus a reserved absorbing state DELTA:

* x -> y (y != x):  f(y) q~(y|x,s) / f(x)
* x -> DELTA:       c - (sum_y f(y) q(dy|x,s)) / f(x)
* total rate:       c + q_x(s)

Dynkin's formula for f holds exactly when the transformed process never
explodes, and the checks below test both sides of that equivalence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from . import _quad
from .embedded import zero_exit_verdict
from .errors import ConfigurationError, ModelError, NumericsError
from .feller import _Observable, _propagate, _time_pieces, forward_ode
from .model import (DELTA, Cemetery, DriftFunction, JumpModel, RateArrays, drift_generator,
                    validate_c_drift)

DELTA_RATE_SLACK = 1e-9
EXPLOSION_TOL = 1e-6
BUDGET_CEILING = 1e-2
ODE_TOL = 1e-10
ZERO_EXIT_ALPHA = 1.0


def _f_values(f: DriftFunction, ys) -> np.ndarray:
    return np.asarray(f.at(np.asarray(ys), 0.0), dtype=float)


class TransformedModel(JumpModel):
    """q^f on S plus DELTA; DELTA sits right after every truncation."""

    def __init__(self, base: JumpModel, f: DriftFunction, c: float):
        base.space.require_countable("the f-transform")
        if f.time_dependent:
            raise ModelError("the f-transform needs a time-independent f")
        if not (c >= 0 and math.isfinite(c)):
            raise ModelError("the drift constant c must be finite and nonnegative")
        self.base = base
        self.f = f
        self.c = float(c)
        self.space = base.space.with_extra(DELTA)
        self.homogeneous = base.homogeneous
        self.has_closed_hazard = base.has_closed_hazard
        self.name = f"{base.name}|f-transform(c={c:g})"
        self._unit_cache: dict = {}

    # -- pointwise --------------------------------------------------------

    def _fx(self, x) -> float:
        fx = float(_f_values(self.f, [x])[0])
        if not fx > 0:
            raise ModelError(f"c-drift function must be positive; f({x!r}) = {fx}")
        return fx

    def _weighted(self, x, t, truncation=None):
        targets = self.base.jump_targets(x, t, truncation)
        tail = self.base.tail_mass(x, t, truncation)
        if tail > 0:
            raise ModelError(f"state {x!r} omits {tail:.3e} of rate mass that cannot be f-weighted")
        if not targets:
            return [], 0.0
        fx = self._fx(x)
        fy = _f_values(self.f, [y for y, _ in targets])
        out = [(y, float(r * v / fx)) for (y, r), v in zip(targets, fy)]
        return out, float(sum(r for _, r in out))

    def delta_rate(self, x, t: float) -> float:
        if isinstance(x, Cemetery):
            return 0.0
        _, moved = self._weighted(x, t)
        q = self.base.total_rate(x, t)
        d = self.c + q - moved
        if d < -DELTA_RATE_SLACK * max(1.0, self.c + q):
            raise ModelError(f"negative rate to DELTA at state {x!r}, time {t}: {d:.6g} "
                             "(f is not a c-drift function here)")
        return max(d, 0.0)

    def total_rate(self, x, t):
        if isinstance(x, Cemetery):
            return 0.0
        return self.c + self.base.total_rate(x, t)

    def jump_targets(self, x, t, truncation=None):
        if isinstance(x, Cemetery):
            return []
        out, moved = self._weighted(x, t, truncation)
        d = self.c + self.base.total_rate(x, t) - moved
        if d < -DELTA_RATE_SLACK * max(1.0, self.c + self.base.total_rate(x, t)):
            raise ModelError(f"negative rate to DELTA at state {x!r}, time {t}: {d:.6g} "
                             "(f is not a c-drift function here)")
        if d > 0:
            out.append((DELTA, d))
        return out

    def rate_bound(self, x):
        return 0.0 if isinstance(x, Cemetery) else self.c + self.base.rate_bound(x)

    def rate_sup(self, x, a, b):
        return 0.0 if isinstance(x, Cemetery) else self.c + self.base.rate_sup(x, a, b)

    def hazard(self, x, s, t):
        if isinstance(x, Cemetery) or t <= s:
            return 0.0
        return self.c * (t - s) + self.base.hazard(x, s, t)

    def _split(self, xs):
        xs = np.asarray(xs)
        if xs.dtype != object:
            return xs, np.zeros(xs.shape, dtype=bool)
        dead = np.array([isinstance(x, Cemetery) for x in xs.ravel()], dtype=bool).reshape(xs.shape)
        live = np.where(dead, 0, xs).astype(np.int64)
        return live, dead

    def hazard_vec(self, xs, s, t):
        live, dead = self._split(xs)
        s = np.broadcast_to(np.asarray(s, dtype=float), live.shape)
        t = np.broadcast_to(np.asarray(t, dtype=float), live.shape)
        h = self.base.hazard_vec(live, s, t) + self.c * np.maximum(t - s, 0.0)
        return np.where(dead, 0.0, h)

    def total_rate_vec(self, xs, t):
        live, dead = self._split(xs)
        return np.where(dead, 0.0, self.c + self.base.total_rate_vec(live, t))

    def hazard_to_infinity_vec(self, xs, s):
        live, dead = self._split(xs)
        base = self.base.hazard_to_infinity_vec(live, s)
        h = np.where(self.c > 0, np.inf, base)
        return np.where(dead, 0.0, h)

    @property
    def constant_after(self):
        return self.base.constant_after

    def time_breaks(self):
        return self.base.time_breaks()

    def describe(self) -> dict:
        return {"name": self.name, "base": self.base.describe(), "f": self.f.describe(), "c": self.c}

    # -- truncated arrays -------------------------------------------------

    def _unit(self, t: float, truncation):
        """Weighted arrays of the base at time t (rows scaled by f(y)/f(x))."""
        arr = self.base.rate_arrays(t, truncation)
        n = arr.size
        fx = _f_values(self.f, np.arange(n))
        if np.any(~(fx > 0)):
            i = int(np.argmin(fx > 0))
            raise ModelError(f"c-drift function must be positive; f({i}) = {fx[i]}")
        off = arr.offdiag.tocoo()
        w = off.data * fx[off.col] / fx[off.row]
        moved = np.bincount(off.row, weights=w, minlength=n)
        exit_ = np.zeros(n)
        for i in np.nonzero(arr.exit > 0)[0]:
            targets = self.base.jump_targets(int(i), t, truncation)
            outside = [(y, r) for y, r in targets if self.base.space.index(y, truncation) is None]
            listed = sum(r for _, r in outside)
            if abs(listed - arr.exit[i]) > 1e-12 * max(1.0, arr.total[i]):
                raise ModelError(f"state {int(i)} omits rate mass that cannot be f-weighted")
            if outside:
                exit_[i] = float(np.dot([r for _, r in outside], _f_values(self.f, [y for y, _ in outside]))) / fx[i]
        return off.row, off.col, w, moved + exit_, exit_, arr.total

    def rate_arrays(self, t, truncation=None):
        rows, cols, w, moved, exit_, total = self._unit(t, truncation)
        n = len(total)
        q = self.c + total
        d = q - moved
        bad = d < -DELTA_RATE_SLACK * np.maximum(1.0, q)
        if bad.any():
            i = int(np.argmax(bad))
            raise ModelError(f"negative rate to DELTA at state {i}, time {t}: {d[i]:.6g} "
                             "(f is not a c-drift function here)")
        d = np.maximum(d, 0.0)
        r = np.concatenate([rows, np.arange(n)])
        cidx = np.concatenate([cols, np.full(n, n)])
        vals = np.concatenate([w, d])
        off = sparse.csr_matrix((vals, (r, cidx)), shape=(n + 1, n + 1))
        off.eliminate_zeros()
        return RateArrays(tuple(range(n)) + (DELTA,), off, np.append(exit_, 0.0), np.append(q, 0.0))


def f_transform(model: JumpModel, f: DriftFunction, c: float | None = None,
                truncation: int | None = None,
                time_samples: Sequence[float] = (0.0,)) -> TransformedModel:
    """Validate f as a c-drift function on the domain and build q^f."""
    if f.kind != "cdrift":
        f = DriftFunction(f.value, f.constant if c is None else c, "cdrift", f.time_derivative,
                          f.time_dependent, f.upper_bound, f.label)
    c = f.constant if c is None else float(c)
    if c != f.constant:
        f = DriftFunction(f.value, c, "cdrift", f.time_derivative, f.time_dependent, f.upper_bound, f.label)
    n = model.space.base_count(truncation)
    check = validate_c_drift(model, f, n, time_samples)
    if not check.passed:
        x, t, resid = check.witness
        raise ModelError(f"f is not a c-drift function: Lf - c f = {resid:.6g} > 0 at state {x!r}, time {t}")
    return TransformedModel(model, f, c)


# --------------------------------------------------------------------------
# transform identity


@dataclass(frozen=True)
class IdentityCheck:
    max_residual: float
    worst_state: object
    lhs: tuple
    rhs: tuple
    states: tuple

    def as_dict(self) -> dict:
        return {"max_residual": self.max_residual, "worst_state": _jsonable(self.worst_state),
                "states": [_jsonable(s) for s in self.states], "lhs": list(self.lhs), "rhs": list(self.rhs)}


def _jsonable(s):
    return int(s) if isinstance(s, (int, np.integer)) else repr(s)


def transform_identity_check(model: JumpModel, f: DriftFunction, c: float, s: float, x, t: float,
                             truncation: int | None = None, tol: float = 1e-12) -> IdentityCheck:
    """Compare P_{q^f}(s,x,t,{y}) with e^{-c(t-s)} f(y) P_q(s,x,t,{y}) / f(x) on every
    singleton of the truncation.

    Truncating both kernels at the same states keeps the identity exact:
    paths that leave the truncation never return to it in either model.
    """
    tm = f_transform(model, f, c, truncation)
    n = model.space.base_count(truncation)
    lhs = forward_ode(tm, s, x, t, n, tol).mass_vector[:n]
    base = forward_ode(model, s, x, t, n, tol).mass_vector[:n]
    fy = _f_values(tm.f, np.arange(n))
    rhs = math.exp(-tm.c * (t - s)) * fy * base / tm._fx(x)
    diff = np.abs(lhs - rhs)
    k = int(np.argmax(diff))
    return IdentityCheck(float(diff[k]), k, tuple(map(float, lhs)), tuple(map(float, rhs)), tuple(range(n)))


# --------------------------------------------------------------------------
# Dynkin's formula


@dataclass(frozen=True)
class NonexplosionBattery:
    verdict: str
    finite_horizon_mass: float
    finite_horizon_gap: float
    schedule: tuple
    zero_exit: dict | None

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "finite_horizon_mass": self.finite_horizon_mass,
                "finite_horizon_gap": self.finite_horizon_gap, "schedule": list(self.schedule),
                "zero_exit": self.zero_exit}


@dataclass(frozen=True)
class DynkinReport:
    lhs: float
    rhs: float
    gap: float
    budget: float
    lhs_budget: float
    rhs_budget: float
    holds: bool | None
    transformed: NonexplosionBattery
    equivalence: bool | None
    status: str
    schedule: tuple
    norm: float = 1.0
    note: str = ""

    @property
    def q_f_nonexplosive(self) -> str:
        return self.transformed.verdict

    def as_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "gap": self.gap, "budget": self.budget,
                "lhs_budget": self.lhs_budget, "rhs_budget": self.rhs_budget,
                "dynkin_holds": self.holds, "transformed": self.transformed.as_dict(),
                "q_f_verdict": self.transformed.verdict, "equivalence": self.equivalence,
                "status": self.status, "schedule": list(self.schedule), "f_norm": self.norm,
                "note": self.note}


def _schedule(model: JumpModel, truncation) -> list:
    if isinstance(truncation, (list, tuple)):
        sched = sorted({int(m) for m in truncation})
    else:
        n = model.space.base_count(truncation)
        sched = sorted({max(1, n // 2), n})
    if model.space.size is not None and sched[-1] >= model.space.size:
        sched = [model.space.size]
    return sched


def _expectations(model: JumpModel, s: float, x, t: float, n: int,
                  g: DriftFunction, extra: Callable | None = None) -> tuple[float, float, float]:
    """E[g(X_t); X_t in truncation], int_s^t E[Lg(X_u, u)] du and, if given,
    int_s^t E[extra(X_u, u)] du, all with paths leaving the truncation dropped."""
    states = np.arange(n)
    i = model.space.index(x, n)
    if i is None:
        raise ModelError(f"state {x!r} is outside the truncation")
    gv = _f_values(g, states)

    def lg(u):
        return np.array([drift_generator(model, g, int(y), u) for y in states])

    def ex(u):
        return np.zeros(n) if extra is None else np.asarray(extra(states, u), dtype=float)

    init = np.zeros((1, n))
    init[0, i] = 1.0
    if t <= s:
        return float(gv[i]), 0.0, 0.0
    fac = model.factorized(n)
    if model.homogeneous:
        obs = [_Observable(lambda u, h=lg(s): h), _Observable(lambda u, h=ex(s): h)]
        prop = _propagate(model, s, t, n, init, observables=obs, rtol=ODE_TOL, atol=ODE_TOL * 1e-3)
        acc = prop.observables[-1, 0]
        return float(prop.masses[-1, 0] @ gv), float(acc[0]), float(acc[1])
    if fac is not None and extra is None:
        u0 = next((u for u in np.linspace(s, t, 7) if float(fac.scale(u)) > 0), None)
        if u0 is not None:
            unit = lg(u0) / float(fac.scale(u0))
            obs = [_Observable(lambda u, h=unit: h, lambda u: float(fac.scale(u)))]
            prop = _propagate(model, s, t, n, init, observables=obs, rtol=ODE_TOL, atol=ODE_TOL * 1e-3)
            return float(prop.masses[-1, 0] @ gv), float(prop.observables[-1, 0, 0]), 0.0
    # general case: Gauss-Legendre in time over the dense ODE output
    pieces = _time_pieces(model, s, t)
    nodes, weights = [], []
    for a, b in zip(pieces[:-1], pieces[1:]):
        if b <= a:
            continue
        panels = max(1, int(math.ceil(b - a)))
        ts, ws = _quad.panel_nodes(_quad.panels(a, b, panels), _quad.DEFAULT_NODES)
        nodes.extend(ts)
        weights.extend(ws)
    prop = _propagate(model, s, t, n, init, t_eval=list(nodes) + [t], rtol=ODE_TOL, atol=ODE_TOL * 1e-3)
    lookup = {float(u): k for k, u in enumerate(prop.times)}
    rhs = ext = 0.0
    for u, w in zip(nodes, weights):
        p = prop.masses[lookup[float(u)], 0]
        rhs += w * float(p @ lg(float(u)))
        ext += w * float(p @ ex(float(u)))
    return float(prop.masses[lookup[float(t)], 0] @ gv), rhs, ext


def transformed_battery(tm: TransformedModel, s: float, x, t: float, schedule: Sequence[int],
                        zero_exit: bool = True) -> NonexplosionBattery:
    """Finite-horizon deficit of q^f plus, for homogeneous rates, the zero-exit verdict."""
    masses = []
    for m in schedule:
        est = forward_ode(tm, s, x, t, m, ODE_TOL)
        masses.append(est.mass())
    if any(b < a - 1e-10 for a, b in zip(masses, masses[1:])):
        raise NumericsError("transformed truncation sequence decreased")
    mass = masses[-1]
    gap = abs(masses[-1] - masses[-2]) if len(masses) > 1 else 0.0
    deficit = 1.0 - mass
    if deficit <= EXPLOSION_TOL:
        finite = "nonexplosive"
    elif gap <= 0.1 * deficit:
        finite = "explosive"
    else:
        finite = "inconclusive"
    ze = None
    verdict = finite
    if zero_exit and tm.homogeneous:
        z = zero_exit_verdict(tm, ZERO_EXIT_ALPHA)
        ze = z.as_dict()
        if z.verdict != "inconclusive" and finite != "inconclusive" and z.verdict != finite:
            verdict = "inconclusive"
    return NonexplosionBattery(verdict, float(mass), float(gap), tuple(schedule), ze)


def _dynkin_core(model, f, c, g, x, t, truncation, s, zero_exit, norm_needed, battery=None):
    f_checked = f_transform(model, f, c, max(_schedule(model, truncation)))
    c = f_checked.c
    f = f_checked.f
    sched = _schedule(model, truncation)
    n_top = sched[-1]
    fx = float(_f_values(f, [x])[0])
    norm = 1.0
    if norm_needed:
        ratio = np.abs(_f_values(g, np.arange(n_top))) / _f_values(f, np.arange(n_top))
        norm = float(ratio.max())
        if not math.isfinite(norm):
            raise ConfigurationError("g is not f-bounded on the truncation")
    lemma_gap = None
    rows = []
    for m in sched:
        e_g, rhs, _ = _expectations(model, s, x, t, m, g)
        e_f = e_g if g is f else _expectations(model, s, x, t, m, f)[0]
        rows.append((e_g, rhs, e_f))
    e_g, rhs, e_f = rows[-1]
    gx = float(_f_values(g, [x])[0])
    lhs = e_g - gx
    # missing in-S mass beyond the truncation: f-mass at most e^{c(t-s)} f(x) - E_in f
    lemma_gap = max(math.exp(c * (t - s)) * fx - e_f, 0.0)
    sched_lhs = abs(rows[-1][0] - rows[-2][0]) if len(rows) > 1 else 0.0
    sched_rhs = abs(rows[-1][1] - rows[-2][1]) if len(rows) > 1 else 0.0
    ode = 10 * ODE_TOL * max(1.0, abs(e_g), abs(rhs))
    if model.space.size is not None and n_top >= model.space.size:
        lhs_budget = ode
        rhs_budget = ode
    else:
        lhs_budget = min(norm * lemma_gap, sched_lhs) + ode
        rhs_budget = sched_rhs + ode
    budget = lhs_budget + rhs_budget
    gap = lhs - rhs
    tm = TransformedModel(model, f, c)
    if battery is None:
        battery = transformed_battery(tm, s, x, t, sched, zero_exit)
    scale = max(1.0, abs(lhs), abs(rhs))
    if budget > BUDGET_CEILING * scale:
        holds = None
        status = "inconclusive"
        note = f"truncation budget {budget:.3e} exceeds the ceiling"
    else:
        holds = abs(gap) <= budget
        status = "holds" if holds else "fails"
        note = ""
    if holds is None or battery.verdict == "inconclusive":
        equivalence = None
    else:
        equivalence = holds == (battery.verdict == "nonexplosive")
    return DynkinReport(float(lhs), float(rhs), float(gap), float(budget), float(lhs_budget),
                        float(rhs_budget), holds, battery, equivalence, status, tuple(sched), norm, note)


def dynkin_check(model: JumpModel, f: DriftFunction, c: float | None, x, t: float,
                 truncation=None, s: float = 0.0, zero_exit: bool = True) -> DynkinReport:
    """E_x f(X_t) - f(x) against int_0^t E_x[Lf(X_u)] du, plus the q^f battery.

    Mass that leaves every truncation (including explosion) contributes zero
    to E f(X_t).  ``equivalence`` is False when the formula's verdict and the
    transformed model's nonexplosion verdict disagree.
    """
    return _dynkin_core(model, f, c, f, x, t, truncation, s, zero_exit, False)


def dynkin_extended_check(model: JumpModel, f: DriftFunction, c: float | None, g: DriftFunction,
                          x, t: float, truncation=None, s: float = 0.0,
                          zero_exit: bool = True) -> DynkinReport:
    """Dynkin's formula for an f-bounded g (|g| <= ||g||_f f).

    Requires the formula to hold for f first; the integrability of
    ||g||_f f(X_u) (c + 2 q(X_u)) is estimated on the truncation schedule and
    a non-settling estimate makes the report inconclusive.
    """
    first = dynkin_check(model, f, c, x, t, truncation, s, zero_exit)
    if first.holds is not True:
        return DynkinReport(math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, None,
                            first.transformed, None, "inconclusive", first.schedule, math.nan,
                            "Dynkin's formula for f does not hold; g is not covered")
    f_ok = f_transform(model, f, c, max(first.schedule))
    c_val = f_ok.c
    sched = list(first.schedule)

    def bound(states, u):
        q = np.array([model.total_rate(int(y), u) for y in states])
        return _f_values(f, states) * (c_val + 2.0 * q)

    integ = [_expectations(model, s, x, t, m, f, bound)[2] for m in sched]
    if not all(math.isfinite(v) for v in integ) or \
            (len(integ) > 1 and abs(integ[-1] - integ[-2]) > BUDGET_CEILING * max(1.0, integ[-1])):
        return DynkinReport(math.nan, math.nan, math.nan, math.nan, math.nan, math.nan, None,
                            first.transformed, None, "inconclusive", first.schedule, math.nan,
                            "integrability estimate did not settle on the truncation")
    rep = _dynkin_core(model, f, c, g, x, t, truncation, s, zero_exit, True, first.transformed)
    return DynkinReport(rep.lhs, rep.rhs, rep.gap, rep.budget, rep.lhs_budget, rep.rhs_budget, rep.holds,
                        rep.transformed, rep.equivalence, rep.status, rep.schedule, rep.norm,
                        f"integrability estimate {integ[-1]:.6g}")
