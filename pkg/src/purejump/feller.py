"""Feller's minimal transition function on truncations.

Two independent routes are provided: the series of n-jump iterates
(:func:`feller_series`) and the Kolmogorov forward equation
(:func:`forward_ode`).  Both work on a truncation {0..N-1} (plus any reserved
cemetery states of the space) in which the complement is lumped into a single
absorbing "outside" accumulator, i.e. they compute the transition function of
the truncated Q-function q^(N).  Mass on S itself is recovered as the
nondecreasing limit over a schedule of truncations (:func:`truncation_limit`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.integrate import solve_ivp
from scipy.stats import poisson

from . import _quad
from .errors import ConfigurationError, ModelError, NumericsError, TruncationLeakError
from .model import Factorization, JumpModel, RateArrays

MASS_SLACK = 1e-12
MONOTONE_SLACK = 1e-10
ODE_RTOL = 1e-10
ODE_ATOL = 1e-13
MAX_SERIES_TERMS = 4000


@dataclass(frozen=True)
class TransitionEstimate:
    """P_q(s, x, t, .) restricted to a truncation, with its bookkeeping."""

    source: tuple
    target_time: float
    states: tuple
    mass_vector: np.ndarray
    outside_mass: float
    deficit: float
    method: dict
    error_budget: float

    @property
    def masses(self) -> dict:
        return {s: float(m) for s, m in zip(self.states, self.mass_vector)}

    def mass(self, target_set=None) -> float:
        """Mass on a set of states (None: the whole truncation)."""
        if target_set is None:
            return float(self.mass_vector.sum())
        lookup = {_key(s): i for i, s in enumerate(self.states)}
        idx = []
        for y in target_set:
            k = lookup.get(_key(y))
            if k is None:
                raise ModelError(f"state {y!r} lies outside the truncation")
            idx.append(k)
        return float(self.mass_vector[idx].sum())

    @property
    def accounted(self) -> float:
        return float(self.mass_vector.sum() + self.outside_mass)

    def as_dict(self) -> dict:
        return {
            "source": {"s": self.source[0], "x": _jsonable(self.source[1])},
            "t": self.target_time,
            "masses": {str(_jsonable(s)): float(m) for s, m in zip(self.states, self.mass_vector)},
            "outside_mass": self.outside_mass,
            "deficit": self.deficit,
            "method": self.method,
            "error_budget": self.error_budget,
        }


def _key(s):
    return ("c", repr(s)) if not isinstance(s, (int, np.integer)) else ("i", int(s))


def _jsonable(s):
    return int(s) if isinstance(s, (int, np.integer)) else repr(s)


def _finish(source, t, states, masses, outside, method, budget) -> TransitionEstimate:
    masses = np.clip(np.asarray(masses, dtype=float), 0.0, None)
    outside = max(float(outside), 0.0)
    deficit = 1.0 - float(masses.sum()) - outside
    if deficit < -MASS_SLACK:
        raise NumericsError(f"accounted mass exceeds one by {-deficit:.3e}")
    deficit = max(deficit, 0.0)
    masses.flags.writeable = False
    return TransitionEstimate(source, float(t), tuple(states), masses, outside, deficit, method, float(budget))


def _source_index(model: JumpModel, x, truncation) -> int:
    i = model.space.index(x, truncation)
    if i is None:
        raise ModelError(f"state {x!r} is outside the truncation")
    return i


def _time_pieces(model: JumpModel, s: float, t: float) -> list[float]:
    cuts = [b for b in getattr(model, "time_breaks", lambda: [])() if s < b < t]
    return [s] + sorted(cuts) + [t]


def _check_bounded(model: JumpModel, states, s: float, t: float) -> float:
    """Largest rate on the truncation over [s, t]; refuses unbounded rates."""
    worst = 0.0
    for x in states:
        r = model.rate_sup(x, s, t)
        if not math.isfinite(r):
            raise ModelError(
                f"rates of state {x!r} are unbounded on [{s}, {t}]; the forward "
                "equation is only valid for rate-bounded target sets"
            )
        worst = max(worst, r)
    return worst


# --------------------------------------------------------------------------
# forward equation


@dataclass
class _Observable:
    """Accumulator d/du acc = weight(u) * (p(u) @ h(u))."""

    h: Callable[[float], np.ndarray]
    weight: Callable[[float], float] = lambda u: 1.0


@dataclass(frozen=True)
class _Propagation:
    times: np.ndarray
    masses: np.ndarray        # (len(times), k, m)
    outside: np.ndarray       # (len(times), k)
    observables: np.ndarray   # (len(times), k, n_obs)
    steps: int
    nfev: int


def _propagate(model: JumpModel, s: float, t: float, truncation, init: np.ndarray,
               t_eval: Sequence[float] | None = None, observables: Sequence[_Observable] = (),
               rtol: float = ODE_RTOL, atol: float = ODE_ATOL) -> _Propagation:
    """Integrate p' = p A(u) for k initial row vectors over [s, t]."""
    init = np.atleast_2d(np.asarray(init, dtype=float))
    k, m = init.shape
    n_obs = len(observables)
    size = k * m + k + k * n_obs

    dense = size <= 400
    eye = sparse.identity(k, format="csr")

    def rate_block(arr: RateArrays):
        top = sparse.vstack([sparse.kron(eye, arr.generator().T),
                             sparse.kron(eye, sparse.csr_matrix(arr.exit[None, :])),
                             sparse.csr_matrix((k * n_obs, k * m))])
        full = sparse.hstack([top, sparse.csr_matrix((size, size - k * m))]).tocsc()
        return full.toarray() if dense else full

    def obs_block(ob: _Observable, slot: int, u: float):
        rows = sparse.kron(eye, sparse.csr_matrix(ob.h(u)[None, :])).tocoo()
        # accumulator rows are interleaved per initial vector: k*m + k + j*n_obs + slot
        r = k * m + k + rows.row * n_obs + slot
        full = sparse.csc_matrix((rows.data, (r, rows.col)), shape=(size, size))
        return full.toarray() if dense else full

    # modulated models share one rate pattern scaled by g(u)
    fac = model.factorized(truncation)
    if fac is None and model.homogeneous:
        arr = model.rate_arrays(s, truncation)
        fac = Factorization(arr.offdiag, arr.exit, arr.total, lambda u: 1.0)
    base_block = None if fac is None else rate_block(fac.at_unit())
    obs_static = [obs_block(ob, j, s) for j, ob in enumerate(observables)]

    cache: dict = {}

    def matrix(u):
        hit = cache.get(u)
        if hit is not None:
            return hit
        if len(cache) > 64:
            cache.clear()
        if fac is not None:
            mat = float(fac.scale(u)) * base_block
        else:
            mat = rate_block(model.rate_arrays(u, truncation))
        for ob, blk in zip(observables, obs_static):
            mat = mat + ob.weight(u) * blk
        cache[u] = mat
        return mat

    def fun(u, y):
        return matrix(u) @ y

    def jac(u, y):
        return matrix(u)

    y0 = np.concatenate((init.ravel(), np.zeros(k), np.zeros(k * n_obs)))
    pieces = _time_pieces(model, s, t)
    grid = None if t_eval is None else np.asarray(sorted(set(float(v) for v in t_eval)), dtype=float)
    out_t, out_y = [], []
    steps = nfev = 0
    if grid is not None and grid.size and grid[0] <= s:
        out_t.append(s)
        out_y.append(y0.copy())
    y = y0
    for a, b in zip(pieces[:-1], pieces[1:]):
        if b <= a:
            continue
        ev = None
        if grid is not None:
            ev = grid[(grid > a) & (grid <= b)]
            if ev.size == 0 or ev[-1] != b:
                ev = np.append(ev, b)
        sol = solve_ivp(fun, (a, b), y, method="Radau", jac=jac, rtol=rtol, atol=atol,
                        t_eval=ev, first_step=None)
        if sol.status != 0:
            raise NumericsError(
                f"forward equation failed on [{a}, {b}]: {sol.message} "
                "(rates too disparate for the tolerance; tighten the truncation or relax tol)"
            )
        steps += len(sol.t)
        nfev += sol.nfev
        y = sol.y[:, -1].copy()
        if grid is not None:
            keep = np.isin(sol.t, grid)
            out_t.extend(sol.t[keep].tolist())
            out_y.extend(sol.y[:, keep].T)
    if grid is None:
        out_t = [t]
        out_y = [y]
    ys = np.array(out_y)
    times = np.array(out_t)
    masses = ys[:, : k * m].reshape(-1, k, m)
    outside = ys[:, k * m: k * m + k]
    obs = ys[:, k * m + k:].reshape(len(times), k, n_obs)
    return _Propagation(times, masses, outside, obs, steps, nfev)


def forward_ode(model: JumpModel, s: float, x, t: float, truncation: int | None = None,
                tol: float = ODE_RTOL, outside_ceiling: float | None = None) -> TransitionEstimate:
    """P(s, x, t, .) on a truncation from the Kolmogorov forward equation."""
    model.space.require_countable("forward_ode")
    if t < s:
        raise ConfigurationError("need s <= t")
    states = model.space.states(truncation)
    i = _source_index(model, x, truncation)
    if t == s:
        e = np.zeros(len(states))
        e[i] = 1.0
        return _finish((s, x), t, states, e, 0.0, {"name": "forward_ode", "steps": 0}, 0.0)
    _check_bounded(model, states, s, t)
    init = np.zeros((1, len(states)))
    init[0, i] = 1.0
    prop = _propagate(model, s, t, truncation, init, rtol=tol, atol=tol * 1e-3)
    masses = prop.masses[-1, 0]
    outside = float(prop.outside[-1, 0])
    # the integrator conserves total mass; its drift is the honest error proxy
    drift = abs(1.0 - masses.sum() - outside - _leak(model, states, s, t))
    budget = max(tol * (t - s), drift) + 10 * tol * 1e-3
    est = _finish((s, x), t, states, masses, outside,
                  {"name": "forward_ode", "steps": prop.steps, "nfev": prop.nfev, "rtol": tol}, budget)
    if outside_ceiling is not None and est.outside_mass > outside_ceiling:
        raise TruncationLeakError(f"outside mass {est.outside_mass:.3e} exceeds ceiling {outside_ceiling}",
                                  est.outside_mass)
    return est


def _leak(model, states, s, t) -> float:
    """Non-conservative loss; zero for every Q-function in the package."""
    return 0.0


def transition_matrix(model: JumpModel, s: float, t: float, truncation: int | None = None,
                      tol: float = ODE_RTOL) -> tuple[np.ndarray, np.ndarray]:
    """Rows P(s, y, t, .) for every y in the truncation, plus outside masses."""
    states = model.space.states(truncation)
    m = len(states)
    if t == s:
        return np.eye(m), np.zeros(m)
    _check_bounded(model, states, s, t)
    prop = _propagate(model, s, t, truncation, np.eye(m), rtol=tol, atol=tol * 1e-3)
    return prop.masses[-1], prop.outside[-1]


def transition_curve(model: JumpModel, s: float, x, t: float, grid: Sequence[float],
                     truncation: int | None = None, target_set=None, tol: float = ODE_RTOL):
    """P(s, x, u, target_set) for u on ``grid`` (forward equation)."""
    states = model.space.states(truncation)
    i = _source_index(model, x, truncation)
    grid = np.asarray(sorted(set([float(u) for u in grid if s <= u <= t])))
    init = np.zeros((1, len(states)))
    init[0, i] = 1.0
    if t == s:
        return grid, np.full(grid.shape, 1.0 if target_set is None or x in target_set else 0.0)
    _check_bounded(model, states, s, t)
    prop = _propagate(model, s, t, truncation, init, t_eval=grid, rtol=tol, atol=tol * 1e-3)
    if target_set is None:
        sel = np.ones(len(states), dtype=bool)
    else:
        sel = np.zeros(len(states), dtype=bool)
        for y in target_set:
            j = model.space.index(y, truncation)
            if j is None:
                raise ModelError(f"state {y!r} lies outside the truncation")
            sel[j] = True
    return prop.times, prop.masses[:, 0, sel].sum(axis=1)


# --------------------------------------------------------------------------
# series of iterates


def _hazard_table(model: JumpModel, states, a: float, times: np.ndarray) -> np.ndarray:
    """H[j, i] = integral of q_{states[i]} over [a, times[j]]."""
    out = np.empty((len(times), len(states)))
    xs = np.array(states, dtype=object)
    for j, w in enumerate(times):
        out[j] = model.hazard_vec(xs, a, float(w))
    return out


def _series_pass(model, states, truncation, s, t, n_nodes, n_terms, max_rate, source):
    """Forward recursion for the n-jump iterates started from one source state.

    phi_{n+1}(u, y) = int_s^u sum_z phi_n(w, z) q_zy(w) exp(-H_y(w, u)) dw,
    evaluated panel by panel at Gauss-Legendre nodes.  Returns the summed
    row at t (last slot: lumped outside) and the per-term maxima.
    """
    m = len(states)
    size = m + 1  # last slot: lumped outside
    width = t - s
    n_panels = max(1, int(math.ceil(max_rate * width / 5.0)))
    edges = _quad.panels(s, t, n_panels)
    xg, wg = _quad.gauss_legendre(n_nodes)
    head_mat = wg[None, :] - _quad.tail_integration_matrix(n_nodes)  # int_{-1}^{x_j}

    q_nodes, haz_left, haz_panel, node_times = [], [], [], []
    for p in range(n_panels):
        a, b = edges[p], edges[p + 1]
        nodes = a + 0.5 * (b - a) * (xg + 1.0)
        node_times.append(nodes)
        if model.homogeneous and q_nodes:
            q_nodes.append(q_nodes[0])
        else:
            qs = np.zeros((1 if model.homogeneous else n_nodes, size, size))
            for j, w in enumerate(nodes[:len(qs)]):
                arr = model.rate_arrays(float(w), truncation)
                qs[j, :m, :m] = arr.offdiag.toarray()
                qs[j, :m, m] = arr.exit
            q_nodes.append(qs[0] if model.homogeneous else qs)
        h_left = _hazard_table(model, states, a, nodes)             # H(a, w)
        h_full = _hazard_table(model, states, a, np.array([b]))[0]  # H(a, b)
        haz_left.append(np.concatenate((h_left, np.zeros((n_nodes, 1))), axis=1))
        haz_panel.append(np.append(h_full, 0.0))

    # n = 0 term: the source survives without jumping
    h_src = np.append(_hazard_table(model, states, s, np.array([t]))[0], 0.0)[source]
    phi_nodes = []
    for p in range(n_panels):
        phi = np.zeros((n_nodes, size))
        phi[:, source] = np.exp(-_hazard_table(model, states, s, node_times[p])[:, source])
        phi_nodes.append(phi)
    total = np.zeros(size)
    total[source] = math.exp(-h_src)
    term_norms = [float(total.max())]

    for _ in range(n_terms):
        new_nodes = []
        carry = np.zeros(size)  # phi_{n+1}(a_p, .)
        for p in range(n_panels):
            half = 0.5 * (edges[p + 1] - edges[p])
            if model.homogeneous:
                g = phi_nodes[p] @ q_nodes[p]  # arrivals into y at w
            else:
                g = np.matmul(phi_nodes[p][:, None, :], q_nodes[p])[:, 0, :]
            k_vals = np.exp(haz_left[p]) * g                          # e^{H(a,w)} g
            cum = half * (head_mat @ k_vals)                          # int_a^u
            new_nodes.append(np.exp(-haz_left[p]) * (carry[None, :] + cum))
            carry = np.exp(-haz_panel[p]) * (carry + half * (wg @ k_vals))
        phi_nodes = new_nodes
        total += carry
        term_norms.append(float(carry.max()))
    return total, term_norms


def feller_series(model: JumpModel, s: float, x, t: float, truncation: int | None = None,
                  n_terms: int | None = None, n_nodes: int = _quad.DEFAULT_NODES,
                  outside_ceiling: float | None = None, tail_tol: float = 1e-13) -> TransitionEstimate:
    """Partial sum of the n-jump iterates P^(0) + ... + P^(n_terms).

    The recursion's time integral is done with composite Gauss-Legendre
    panels (rate x width <= 5 per panel) and a spectral tail-integration
    matrix; the error budget adds the Poisson tail of the jump count and a
    node-doubling quadrature estimate.
    """
    model.space.require_countable("feller_series")
    if t < s:
        raise ConfigurationError("need s <= t")
    states = model.space.states(truncation)
    i = _source_index(model, x, truncation)
    if t == s:
        e = np.zeros(len(states))
        e[i] = 1.0
        return _finish((s, x), t, states, e, 0.0, {"name": "series", "n_terms": 0}, 0.0)
    max_rate = _check_bounded(model, states, s, t)
    lam = max_rate * (t - s)
    if n_terms is None:
        n_terms = int(poisson.isf(tail_tol, lam)) + 2 if lam > 0 else 1
    n_terms = max(int(n_terms), 1)
    if n_terms > MAX_SERIES_TERMS:
        raise ConfigurationError(
            f"series needs {n_terms} terms (max rate x time = {lam:.3g}); "
            "use a smaller truncation, a shorter interval or forward_ode")
    coarse, norms = _series_pass(model, states, truncation, s, t, n_nodes, n_terms, max_rate, i)
    fine, _ = _series_pass(model, states, truncation, s, t, 2 * n_nodes, n_terms, max_rate, i)
    quad_err = float(np.max(np.abs(fine - coarse)))
    tail = float(poisson.sf(n_terms, lam)) if lam > 0 else 0.0
    m = len(states)
    est = _finish((s, x), t, states, coarse[:m], coarse[m],
                  {"name": "series", "n_terms": n_terms, "nodes": n_nodes,
                   "poisson_rate": lam, "term_norms_tail": norms[-3:]},
                  tail + quad_err + MASS_SLACK)
    if outside_ceiling is not None and est.outside_mass > outside_ceiling:
        raise TruncationLeakError(f"outside mass {est.outside_mass:.3e} exceeds ceiling {outside_ceiling}",
                                  est.outside_mass)
    return est


def series_partial_sums(model: JumpModel, s: float, x, t: float, target_set, truncation=None,
                        n_terms: int = 10, n_nodes: int = _quad.DEFAULT_NODES) -> np.ndarray:
    """Running sums of P^(n)(s,x,t,target_set) for n = 0..n_terms."""
    states = model.space.states(truncation)
    i = _source_index(model, x, truncation)
    max_rate = _check_bounded(model, states, s, t)
    sel = [model.space.index(y, truncation) for y in target_set]
    sums = []
    for n in range(n_terms + 1):
        tot, _ = _series_pass(model, states, truncation, s, t, n_nodes, n, max_rate, i) if n else (None, None)
        if n == 0:
            h = model.hazard(x, s, t)
            sums.append(math.exp(-h) if i in sel else 0.0)
        else:
            sums.append(float(tot[sel].sum()))
    return np.array(sums)


# --------------------------------------------------------------------------
# Chapman-Kolmogorov


@dataclass(frozen=True)
class CKResult:
    max_residual: float
    budget: float
    outside_slack: float


def chapman_kolmogorov_check(model: JumpModel, s: float, u: float, t: float, x,
                             truncation: int | None = None, tol: float = ODE_RTOL) -> CKResult:
    """max_z |P(s,x,t,{z}) - sum_y P(s,x,u,{y}) P(u,y,t,{z})| over the truncation."""
    if not s < u < t:
        raise ConfigurationError("need s < u < t")
    whole = forward_ode(model, s, x, t, truncation, tol)
    first = forward_ode(model, s, x, u, truncation, tol)
    rows, _ = transition_matrix(model, u, t, truncation, tol)
    composed = first.mass_vector @ rows
    resid = float(np.max(np.abs(composed - whole.mass_vector)))
    return CKResult(resid, whole.error_budget + first.error_budget + float(rows.shape[0]) * tol,
                    float(whole.outside_mass))


# --------------------------------------------------------------------------
# truncation limits


@dataclass(frozen=True)
class TruncationLimit:
    schedule: tuple
    sequence: tuple
    limit: float
    gap: float
    worst_violation: float
    target: str

    def as_dict(self) -> dict:
        return {"schedule": list(self.schedule), "sequence": list(self.sequence),
                "limit": self.limit, "gap": self.gap,
                "worst_violation": self.worst_violation, "target": self.target}


def truncation_limit(model: JumpModel, s: float, x, t: float, target_set=None,
                     truncation_schedule: Sequence[int] = (10, 20, 40),
                     tol: float = ODE_RTOL) -> TruncationLimit:
    """P_{q^(m)}(s, x, t, target_set) along an increasing schedule of m.

    ``target_set=None`` tracks the whole active set S_m (mass not yet
    exited), whose limit is P_q(s, x, t, S).  A decrease beyond 1e-10 is a
    hard failure.
    """
    sched = [int(m) for m in truncation_schedule]
    if not sched or any(b <= a for a, b in zip(sched, sched[1:])):
        raise ConfigurationError("truncation schedule must be strictly increasing")
    if model.space.index(x, sched[0]) is None:
        raise ConfigurationError("source state must lie in the smallest truncation")
    if target_set is not None:
        for y in target_set:
            if model.space.index(y, sched[0]) is None:
                raise ConfigurationError("target set must lie in the smallest truncation")
    seq = []
    for m in sched:
        est = forward_ode(model, s, x, t, m, tol)
        seq.append(est.mass(target_set))
    worst = 0.0
    for a, b in zip(seq, seq[1:]):
        worst = max(worst, a - b)
    if worst > MONOTONE_SLACK:
        raise NumericsError(f"truncation sequence decreased by {worst:.3e}")
    gap = abs(seq[-1] - seq[-2]) if len(seq) > 1 else math.inf
    label = "S_m" if target_set is None else repr(sorted(target_set, key=repr))
    return TruncationLimit(tuple(sched), tuple(seq), seq[-1], gap, worst, label)


# --------------------------------------------------------------------------
# resolvent


@dataclass(frozen=True)
class ResolventEstimate:
    value: float
    error_budget: float
    sequence: tuple
    schedule: tuple
    gap: float
    stabilized: bool
    tail_bound: float

    def as_dict(self) -> dict:
        return {"value": self.value, "error_budget": self.error_budget,
                "sequence": list(self.sequence), "schedule": list(self.schedule),
                "gap": self.gap, "stabilized": self.stabilized, "tail_bound": self.tail_bound}


def _resolvent_at(model, alpha, v, x, m, horizon, tol):
    states = model.space.states(m)
    i = _source_index(model, x, m)
    init = np.zeros((1, len(states)))
    init[0, i] = 1.0
    ones = np.ones(len(states))
    ob = _Observable(lambda u: ones, lambda u: alpha * math.exp(-alpha * (u - v)))
    _check_bounded(model, states, v, v + horizon)
    prop = _propagate(model, v, v + horizon, m, init, observables=[ob], rtol=tol, atol=tol * 1e-3)
    integral = float(prop.observables[-1, 0, 0])
    survive = float(prop.masses[-1, 0].sum())
    return integral, survive


def resolvent(model: JumpModel, alpha: float, v: float, x, truncation=None,
              horizon: float | None = None, gap_tol: float = 1e-3,
              tol: float = 1e-9) -> ResolventEstimate:
    """alpha * int_0^inf e^{-alpha t} P_q(v, x, v+t, S) dt via truncation limits.

    ``truncation`` is an int (paired with half its size) or an increasing
    schedule.  The tail beyond ``horizon`` lies in [0, e^{-alpha H} P(H)];
    the midpoint is reported and half the interval enters the budget.
    """
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    model.space.require_countable("resolvent")
    if truncation is None:
        truncation = model.space.truncation_default
    if isinstance(truncation, (int, np.integer)):
        top = model.space.base_count(int(truncation))
        if model.space.size is not None and top == model.space.size:
            sched = [top]  # the whole finite space: no truncation error
        else:
            sched = sorted({max(1, top // 2), top})
    else:
        sched = [int(m) for m in truncation]
    if horizon is None:
        horizon = 30.0 / alpha
    values, tails = [], []
    for m in sched:
        integral, survive = _resolvent_at(model, alpha, v, x, m, horizon, tol)
        tail = math.exp(-alpha * horizon) * survive
        values.append(integral + 0.5 * tail)
        tails.append(0.5 * tail)
    worst = max([a - b for a, b in zip(values, values[1:])], default=0.0)
    if worst > 1e-7:
        raise NumericsError(f"resolvent decreased along the truncation schedule by {worst:.3e}")
    gap = abs(values[-1] - values[-2]) if len(values) > 1 else 0.0
    budget = tails[-1] + gap + 10 * tol * horizon
    return ResolventEstimate(float(min(values[-1], 1.0)), float(budget), tuple(values), tuple(sched),
                             float(gap), gap <= gap_tol, float(math.exp(-alpha * horizon)))
