"""The alpha-killed embedded chain on (time x state) and its fixed points.

From cell (v, x) the chain jumps to (v + t, y) with density
``exp(-alpha t - H_x(v, v+t)) q~(y | x, v+t)`` and is otherwise absorbed
in the cemetery (inf, Delta).  The minimal solution W of
``W = absorb + P W`` is the resolvent alpha int e^{-alpha t} P(v,x,v+t,S) dt;
U = 1 - W is the maximal solution of the zero-exit equation.

On a truncation the mass that leaves {0..N-1} is routed to an exit with
W = 0 (U = 1), so W_N is a lower bound for W that increases with N.
Models whose rates are time-constant use the states-only chain; otherwise the
time coordinate lives on a grid up to T, after which the rates must be
constant (landing times between grid points are split linearly).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from . import _quad
from .errors import ConfigurationError, ModelError, NumericsError
from .model import Cemetery, JumpModel

ROW_SUM_TOL = 1e-10
ZERO_EXIT_TOL = 1e-4
CERT_TOL = 1e-9
VI_TOL = 1e-8
VI_MAX_SWEEPS = 10_000
# explosive verdicts need U to have settled between N and 2N
STABILITY_RTOL = 1e-2
HOMOGENEOUS_TRUNCATION = 1 << 16
SURVIVAL_FLOOR = 1e-18
RATE_CEILING = 1e250


@dataclass(frozen=True)
class EmbeddedChain:
    model: JumpModel
    alpha: float
    time_grid: tuple | None
    truncation: int
    states: tuple
    kernel: sparse.csr_matrix      # cell -> cell
    absorb: np.ndarray             # probability of (inf, Delta)
    exit: np.ndarray               # probability of leaving the truncation
    row_sum_error: float

    @property
    def homogeneous(self) -> bool:
        return self.time_grid is None

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_cells(self) -> int:
        return self.kernel.shape[0]

    def cell(self, v: float, x) -> int:
        """Cell at or just below time v (the tail block beyond the grid)."""
        j = self.model.space.index(x, self.truncation)
        if j is None:
            raise ModelError(f"state {x!r} outside the truncation")
        if self.time_grid is None:
            return j
        grid = self.time_grid
        if v >= grid[-1]:
            return (len(grid) - 1) * self.n_states + j
        i = int(np.searchsorted(grid, v, side="right") - 1)
        return i * self.n_states + j

    def absorb_prob(self, v: float, x) -> float:
        return float(self.absorb[self.cell(v, x)])


def _state_vec(states):
    return np.array(states, dtype=np.int64) if all(isinstance(s, (int, np.integer)) for s in states) \
        else np.array(states, dtype=object)


def _homogeneous_block(model: JumpModel, alpha: float, t: float, truncation: int):
    arr = model.rate_arrays(t, truncation)
    if not np.all(np.isfinite(arr.total)):
        bad = arr.states[int(np.argmin(np.isfinite(arr.total)))]
        raise ModelError(f"rate of state {bad!r} overflows; use a smaller truncation")
    denom = alpha + arr.total
    kern = sparse.diags(1.0 / denom) @ arr.offdiag
    return kern.tocsr(), alpha / denom, arr.exit / denom


def build_kernel(model: JumpModel, alpha: float, time_grid: Sequence[float] | None = None,
                 truncation: int | None = None, nodes: int = 16) -> EmbeddedChain:
    """Assemble p^alpha on the truncation (and time grid, if rates vary)."""
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    model.space.require_countable("build_kernel")
    if truncation is None:
        truncation = model.space.truncation_default
    truncation = model.space.base_count(truncation)
    states = tuple(model.space.states(truncation))
    settle = model.constant_after
    if time_grid is None:
        if settle is None:
            raise ConfigurationError(
                "rates are not eventually time-constant; the embedded chain needs a "
                "declared constant-rate tail (or a stopped model)")
        if settle == 0.0:
            kern, absorb, exit_ = _homogeneous_block(model, alpha, 0.0, truncation)
            err = float(np.max(np.abs(np.asarray(kern.sum(axis=1)).ravel() + absorb + exit_ - 1.0)))
            _check_rows(err)
            return EmbeddedChain(model, float(alpha), None, truncation, states, kern, absorb, exit_, err)
        time_grid = np.linspace(0.0, settle, 65)
    grid = np.asarray(sorted(set(float(v) for v in time_grid)), dtype=float)
    if grid[0] != 0.0 or len(grid) < 2:
        raise ConfigurationError("time grid must start at 0 and have at least two points")
    if settle is None or settle > grid[-1] + 1e-12:
        raise ConfigurationError(
            f"time grid ends at {grid[-1]} but rates only settle at {settle}; extend the grid")
    return _grid_chain(model, float(alpha), grid, truncation, states, nodes)


def _check_rows(err: float):
    if err > ROW_SUM_TOL:
        raise NumericsError(f"kernel rows miss unit mass by {err:.3e}")


def _grid_chain(model, alpha, grid, truncation, states, nodes):
    n = len(states)
    g_pts = len(grid) - 1           # grid cells 0..G-1, tail block G
    end = grid[-1]
    xs = _state_vec(states)
    xg, wg = _quad.gauss_legendre(nodes)

    # quadrature nodes per interval, with sub-panels short enough for the rates
    taus, weights, owner, left_w = [], [], [], []
    for j in range(g_pts):
        a, b = grid[j], grid[j + 1]
        qmax = max(model.rate_sup(x, a, b) for x in states)
        sub = int(min(256, max(1, math.ceil((alpha + qmax) * (b - a) / 2.0))))
        for k in range(sub):
            lo = a + (b - a) * k / sub
            hi = a + (b - a) * (k + 1) / sub
            t = lo + 0.5 * (hi - lo) * (xg + 1.0)
            taus.append(t)
            weights.append(0.5 * (hi - lo) * wg)
            owner.append(np.full(nodes, j))
            left_w.append((b - t) / (b - a))
    tau = np.concatenate(taus)
    w = np.concatenate(weights)
    own = np.concatenate(owner)
    phi_left = np.concatenate(left_w)

    # log of e^{-alpha tau - H_x(0, tau)} at nodes and grid points
    def log_surv(times):
        return np.stack([-alpha * t - model.hazard_vec(xs, 0.0, t) for t in times])

    la_nodes = log_surv(tau)                       # (K, n)
    la_grid = log_surv(grid)                       # (G+1, n)

    fac = model.factorized(truncation)
    scaled = fac is not None
    if scaled:
        off0 = fac.offdiag
        exit0 = fac.exit
        g_nodes = np.asarray(fac.scale(tau), dtype=float)
    else:
        node_arrays = [model.rate_arrays(float(t), truncation) for t in tau]

    # rates on the constant tail, evaluated just past the grid end
    end_arr = model.rate_arrays(float(np.nextafter(end, math.inf)), truncation)
    end_denom = alpha + end_arr.total
    tail_kern = (sparse.diags(1.0 / end_denom) @ end_arr.offdiag).tocsr()

    blocks_rows, blocks_cols, blocks_vals = [], [], []
    absorb = np.empty((g_pts + 1) * n)
    exit_ = np.empty((g_pts + 1) * n)

    def add_block(ri, ci, mat):
        mat = mat.tocoo()
        blocks_rows.append(ri * n + mat.row)
        blocks_cols.append(ci * n + mat.col)
        blocks_vals.append(mat.data)

    for i in range(g_pts):
        sel = own >= i
        ratio = np.exp(la_nodes[sel] - la_grid[i][None, :])      # (k, n) <= 1
        wk = w[sel][:, None] * ratio
        js = own[sel]
        pl = phi_left[sel][:, None]
        stay = np.exp(la_grid[-1] - la_grid[i])                  # survival to the tail
        absorb[i * n:(i + 1) * n] = alpha * (wk.sum(axis=0) + stay / end_denom)
        if scaled:
            gk = g_nodes[sel][:, None]
            coef_left = np.zeros((g_pts + 1, n))
            coef_right = np.zeros((g_pts + 1, n))
            np.add.at(coef_left, js, wk * gk * pl)
            np.add.at(coef_right, js + 1, wk * gk * (1.0 - pl))
            coef = coef_left + coef_right
            exit_[i * n:(i + 1) * n] = (wk * gk).sum(axis=0) * exit0 + stay * end_arr.exit / end_denom
            for j in range(i, g_pts):
                if np.any(coef[j]):
                    add_block(i, j, sparse.diags(coef[j]) @ off0)
            tail_coef = coef[g_pts]
        else:
            sel_idx = np.nonzero(sel)[0]
            acc = {}
            ex = np.zeros(n)
            for r, kk in enumerate(sel_idx):
                arr = node_arrays[kk]
                j = own[kk]
                for tgt, share in ((j, pl[r]), (j + 1, 1.0 - pl[r])):
                    m = sparse.diags(wk[r] * share) @ arr.offdiag
                    acc[tgt] = m if tgt not in acc else acc[tgt] + m
                ex += wk[r] * arr.exit
            exit_[i * n:(i + 1) * n] = ex + stay * end_arr.exit / end_denom
            for j, m in acc.items():
                if j < g_pts:
                    add_block(i, j, m)
            tail_coef = None
            if g_pts in acc:
                add_block(i, g_pts, acc[g_pts] + sparse.diags(stay) @ tail_kern)
        if tail_coef is not None:
            add_block(i, g_pts, sparse.diags(tail_coef) @ off0 + sparse.diags(stay) @ tail_kern)
        elif g_pts not in acc:
            add_block(i, g_pts, sparse.diags(stay) @ tail_kern)

    add_block(g_pts, g_pts, tail_kern)
    absorb[g_pts * n:] = alpha / end_denom
    exit_[g_pts * n:] = end_arr.exit / end_denom
    size = (g_pts + 1) * n
    kern = sparse.csr_matrix((np.concatenate(blocks_vals),
                              (np.concatenate(blocks_rows), np.concatenate(blocks_cols))),
                             shape=(size, size))
    err = float(np.max(np.abs(np.asarray(kern.sum(axis=1)).ravel() + absorb + exit_ - 1.0)))
    _check_rows(err)
    return EmbeddedChain(model, alpha, tuple(grid), truncation, states, kern, absorb, exit_, err)


# --------------------------------------------------------------------------
# value iteration


@dataclass(frozen=True)
class ValueField:
    """Values on the chain's cells (the tail block continues beyond the grid)."""

    chain: EmbeddedChain
    values: np.ndarray
    iteration_count: int
    residual: float              # sup-norm change of the last sweep
    fixed_point_residual: float  # |values - (absorb + P values)| after the solve
    converged: bool

    def at(self, v: float, x) -> float:
        ch = self.chain
        if ch.time_grid is None or v >= ch.time_grid[-1]:
            return float(self.values[ch.cell(v, x)])
        grid = ch.time_grid
        i = int(np.searchsorted(grid, v, side="right") - 1)
        lam = (v - grid[i]) / (grid[i + 1] - grid[i])
        j = ch.model.space.index(x, ch.truncation)
        n = ch.n_states
        a = self.values[i * n + j]
        b = self.values[(i + 1) * n + j]
        return float((1 - lam) * a + lam * b)

    def window(self, states) -> np.ndarray:
        """Values at every grid time for the given states."""
        ch = self.chain
        idx = [ch.model.space.index(x, ch.truncation) for x in states]
        block = self.values.reshape(-1, ch.n_states)
        return block[:, idx]


def value_iterate_minimal(chain: EmbeddedChain, max_sweeps: int = VI_MAX_SWEEPS,
                          tol: float = VI_TOL) -> ValueField:
    """Minimal solution W of W = absorb + P W (exit cells count as 0).

    Runs monotone sweeps from W = 0 and also solves the truncated fixed point
    directly; the sweeps converge to that solution from below, so the solve
    is reported and the sweeps serve as a monotonicity cross-check.
    """
    p = chain.kernel
    c = chain.absorb
    w = np.zeros_like(c)
    resid = math.inf
    sweeps = 0
    for sweeps in range(1, int(max_sweeps) + 1):
        nxt = c + p @ w
        if np.any(nxt < w - 1e-15):
            raise NumericsError("value iteration lost monotonicity")
        resid = float(np.max(np.abs(nxt - w)))
        w = nxt
        if resid <= tol:
            break
    exact = _solve(chain)
    if np.any(w > exact + 1e-9):
        raise NumericsError("value iteration overshot the fixed point")
    fp = float(np.max(np.abs(exact - (c + p @ exact))))
    exact = np.clip(exact, 0.0, 1.0)
    exact.flags.writeable = False
    return ValueField(chain, exact, sweeps, resid, fp, resid <= tol)


def _solve(chain: EmbeddedChain) -> np.ndarray:
    size = chain.n_cells
    a = (sparse.identity(size, format="csc") - chain.kernel.tocsc())
    sol = spsolve(a, chain.absorb)
    if not np.all(np.isfinite(sol)):
        raise NumericsError("fixed-point solve failed")
    return np.asarray(sol, dtype=float)


# --------------------------------------------------------------------------
# zero-exit verdicts


@dataclass(frozen=True)
class ZeroExitVerdict:
    verdict: str                  # nonexplosive | explosive | inconclusive
    U: ValueField                 # on the smaller truncation, U = 1 - W
    W_at_origin: float
    sup_U: float
    sup_U_doubled: float
    truncations: tuple
    window: tuple
    certificate_margin: float | None
    fixed_point_residual: float
    reason: str

    def as_dict(self) -> dict:
        return {"verdict": self.verdict, "W_at_origin": self.W_at_origin, "sup_U": self.sup_U,
                "truncation_stability": {"truncations": list(self.truncations),
                                         "sup_U": [self.sup_U, self.sup_U_doubled]},
                "window": [int(x) for x in self.window],
                "residuals": {"fixed_point": self.fixed_point_residual,
                              "value_iteration": self.U.residual,
                              "sweeps": self.U.iteration_count},
                "certificate_margin": self.certificate_margin, "reason": self.reason}


def _u_field(w: ValueField) -> ValueField:
    u = 1.0 - w.values
    u.flags.writeable = False
    return ValueField(w.chain, u, w.iteration_count, w.residual, w.fixed_point_residual, w.converged)


def maximal_U(chain: EmbeddedChain, window: Sequence | None = None, tol: float = ZERO_EXIT_TOL,
              origin=0, max_sweeps: int = VI_MAX_SWEEPS) -> ZeroExitVerdict:
    """U = 1 - W with a zero-exit verdict checked on N and 2N states.

    ``window`` is the set of states inspected (default the first five);
    states near the truncation edge always carry exit mass and are excluded.
    """
    if window is None:
        window = tuple(x for x in chain.states if not isinstance(x, Cemetery))[:5]
    window = tuple(window)
    w_small = value_iterate_minimal(chain, max_sweeps)
    space = chain.model.space
    big_n = space.base_count(2 * chain.truncation)
    if big_n > chain.truncation:
        grid = chain.time_grid
        big = build_kernel(chain.model, chain.alpha, grid, big_n)
        w_big = value_iterate_minimal(big, max_sweeps)
    else:
        big, w_big = chain, w_small   # whole finite space: nothing to double
    u_small = _u_field(w_small)
    u_big = _u_field(w_big)
    sup_s = float(np.max(u_small.window(window)))
    sup_b = float(np.max(u_big.window(window)))
    origin_w = w_small.at(0.0, origin)
    fp = max(w_small.fixed_point_residual, w_big.fixed_point_residual)
    if fp > 1e-6:
        return ZeroExitVerdict("inconclusive", u_small, origin_w, sup_s, sup_b,
                               (chain.truncation, big.truncation), window, None, fp,
                               "fixed-point residual above 1e-6")
    if sup_s <= tol and sup_b <= tol:
        return ZeroExitVerdict("nonexplosive", u_small, origin_w, sup_s, sup_b,
                               (chain.truncation, big.truncation), window, None, fp,
                               "sup U within tolerance on both truncations")
    if sup_s > tol and sup_b > tol:
        settled = abs(sup_s - sup_b) <= STABILITY_RTOL * sup_b
        margin = _interior_margin(big, u_big.values)
        if settled and margin >= -CERT_TOL:
            return ZeroExitVerdict("explosive", u_small, origin_w, sup_s, sup_b,
                                   (chain.truncation, big.truncation), window, margin, fp,
                                   "stable nontrivial U satisfying the sub-solution inequality")
        why = "U still moving between truncations" if not settled else "sub-solution inequality fails"
        return ZeroExitVerdict("inconclusive", u_small, origin_w, sup_s, sup_b,
                               (chain.truncation, big.truncation), window, margin, fp, why)
    return ZeroExitVerdict("inconclusive", u_small, origin_w, sup_s, sup_b,
                           (chain.truncation, big.truncation), window, None, fp,
                           "verdict differs between truncations")


def _interior_margin(chain: EmbeddedChain, u: np.ndarray) -> float:
    """min over cells without exit mass of (P U)(cell) - U(cell)."""
    inner = chain.exit <= 0.0
    if not inner.any():
        return -math.inf
    gap = chain.kernel @ u - u
    return float(np.min(gap[inner]))


def default_truncation(model: JumpModel) -> int:
    """2^16 states, halved until the doubled truncation keeps every rate below 1e250.

    Finite spaces use all their states.
    """
    if model.space.size is not None:
        return model.space.size
    n = HOMOGENEOUS_TRUNCATION
    floor = model.space.truncation_default
    while n > floor:
        r = model.rate_bound(2 * n - 1)
        if math.isfinite(r) and r < RATE_CEILING:
            break
        n //= 2
    return max(n, 1)


def zero_exit_verdict(model: JumpModel, alpha: float, truncation: int | None = None,
                      time_grid=None, window=None, tol: float = ZERO_EXIT_TOL) -> ZeroExitVerdict:
    """Build the chain and run :func:`maximal_U` (homogeneous default: 2^16 states)."""
    if truncation is None:
        truncation = default_truncation(model) if model.constant_after == 0.0 and time_grid is None \
            else model.space.truncation_default
    chain = build_kernel(model, alpha, time_grid, truncation)
    return maximal_U(chain, window, tol)


# --------------------------------------------------------------------------
# discounted jump integrals and explosion certificates


def discounted_jump_integral(model: JumpModel, alpha: float, v: float, x,
                             value: Callable[[float, list], np.ndarray],
                             upper: float = math.inf, nodes: int = 16,
                             max_panels: int = 20_000) -> tuple[float, float]:
    """int_0^upper sum_y value(v+t, y) q~(y|x,v+t) e^{-alpha t - H_x(v,v+t)} dt.

    Integrates panel by panel until the discounted survival drops below
    1e-18 (or ``upper`` is reached).  Returns the integral and a
    node-doubling error estimate.
    """
    total = 0.0
    err = 0.0
    a = 0.0
    width = 1.0 / (alpha + max(model.total_rate(x, v), 1e-300))
    if model.rate_sup(x, v, math.inf) == 0:
        return 0.0, 0.0
    for _ in range(max_panels):
        if a >= upper:
            break
        width = min(width, upper - a) if math.isfinite(upper) else width
        r = model.rate_sup(x, v + a, v + a + width)
        if not math.isfinite(r):
            raise ModelError(f"unbounded rate near time {v + a} in state {x!r}")
        if (alpha + r) * width > 2.0:
            width = 2.0 / (alpha + r)
            continue
        coarse = _panel(model, alpha, v, x, value, a, a + width, nodes)
        fine = _panel(model, alpha, v, x, value, a, a + width, 2 * nodes)
        total += fine
        err += abs(fine - coarse)
        a += width
        surv = -alpha * a - model.hazard(x, v, v + a)
        if surv < math.log(SURVIVAL_FLOOR):
            break
        width *= 2.0
    else:
        raise NumericsError("discounted jump integral did not settle")
    return total, err


def jump_integral_rule(model: JumpModel, v: float, x, value: Callable[[float, list], np.ndarray],
                       upper: float, alpha_max: float = 1e3, nodes: int = 16,
                       max_panels: int = 20_000) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature rule (ts, ws) with integral(alpha) = sum ws * exp(-alpha ts).

    Covers int_0^upper sum_y value(v+t, y) q~(y|x,v+t) e^{-alpha t - H_x(v,v+t)} dt
    for every alpha in [0, alpha_max] at once: panels start at width
    1/(alpha_max + rate) and double, so the discount factor stays resolved
    near zero while the hazard bounds the width everywhere.
    """
    if not math.isfinite(upper):
        raise ConfigurationError("quadrature rules need a finite upper limit")
    if upper <= 0 or model.rate_sup(x, v, v + upper) == 0:
        return np.zeros(0), np.zeros(0)
    xg, wg = _quad.gauss_legendre(nodes)
    ts_all, ws_all = [], []
    a = 0.0
    width = 1.0 / (alpha_max + max(model.total_rate(x, v), 1e-300))
    for _ in range(max_panels):
        if a >= upper:
            break
        width = min(width, upper - a)
        r = model.rate_sup(x, v + a, v + a + width)
        if not math.isfinite(r):
            raise ModelError(f"unbounded rate near time {v + a} in state {x!r}")
        if r * width > 2.0:
            width = 2.0 / r
            continue
        ts = a + 0.5 * width * (xg + 1.0)
        xs = np.array([x] * nodes, dtype=np.int64 if isinstance(x, (int, np.integer)) else object)
        haz = model.hazard_vec(xs, np.full(nodes, v), v + ts)
        w = 0.5 * width * wg * np.exp(-haz)
        for k, t in enumerate(ts):
            if w[k] == 0.0:
                continue
            targets = model.jump_targets(x, v + t)
            if not targets:
                w[k] = 0.0
                continue
            ys = [y for y, _ in targets]
            rates = np.array([rt for _, rt in targets])
            w[k] *= float(np.dot(rates, np.asarray(value(v + t, ys), dtype=float)))
        ts_all.append(ts)
        ws_all.append(w)
        a += width
        if -model.hazard(x, v, v + a) < math.log(SURVIVAL_FLOOR):
            break
        width *= 2.0
    else:
        raise NumericsError("quadrature rule did not reach the upper limit")
    return np.concatenate(ts_all), np.concatenate(ws_all)


def _panel(model, alpha, v, x, value, a, b, nodes):
    xg, wg = _quad.gauss_legendre(nodes)
    ts = a + 0.5 * (b - a) * (xg + 1.0)
    xs = np.array([x] * nodes, dtype=np.int64 if isinstance(x, (int, np.integer)) else object)
    haz = model.hazard_vec(xs, np.full(nodes, v), v + ts)
    dens = np.exp(-alpha * ts - haz)
    acc = 0.0
    for t, wt, d in zip(ts, wg, dens):
        if d == 0.0:
            continue
        targets = model.jump_targets(x, v + t)
        if not targets:
            continue
        ys = [y for y, _ in targets]
        rates = np.array([r for _, r in targets])
        vals = np.asarray(value(v + t, ys), dtype=float)
        acc += wt * d * float(np.dot(rates, vals))
    return 0.5 * (b - a) * acc


@dataclass(frozen=True)
class CertificateCheck:
    passed: bool
    worst_margin: float
    witness: tuple | None
    trivial: bool
    checked: int

    def as_dict(self) -> dict:
        return {"passed": self.passed, "worst_margin": self.worst_margin,
                "witness": None if self.witness is None else [repr(w) for w in self.witness],
                "trivial": self.trivial, "checked": self.checked}


def verify_explosion_certificate(model: JumpModel, alpha: float, candidate: Callable,
                                 truncation: int | None = None,
                                 time_samples: Sequence[float] = (0.0,),
                                 tol: float = CERT_TOL) -> CertificateCheck:
    """Check U(v,x) <= int int U(v+t,y) q~(dy|x,v+t) e^{-alpha t - H} dt pointwise.

    ``candidate(v, states)`` returns U at the given states.  For time-constant
    rates the integral is exact: sum_y U(y) q~(y|x) / (alpha + q_x).  Margins
    are in that normalised (probability) scale.  Identically-zero candidates
    are rejected as trivial.
    """
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    states = model.space.states(truncation)
    values = np.concatenate([np.asarray(candidate(float(v), states), dtype=float) for v in time_samples])
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise ModelError("certificate candidate must be finite and nonnegative")
    if float(np.max(np.abs(values), initial=0.0)) <= 1e-12:
        return CertificateCheck(False, 0.0, None, True, 0)
    worst = math.inf
    witness = None
    checked = 0
    const = model.constant_after == 0.0
    for v in time_samples:
        v = float(v)
        ux = np.asarray(candidate(v, states), dtype=float)
        for x, u in zip(states, ux):
            if const:
                targets = model.jump_targets(x, v)
                q = model.total_rate(x, v)
                if targets:
                    ys = [y for y, _ in targets]
                    rhs = float(np.dot([r for _, r in targets], np.asarray(candidate(v, ys), dtype=float)))
                    rhs /= alpha + q
                else:
                    rhs = 0.0
            else:
                rhs, _ = discounted_jump_integral(model, alpha, v, x, candidate)
            margin = rhs - float(u)
            checked += 1
            if margin < worst:
                worst = margin
                if margin < -tol:
                    witness = witness or (x, v, margin)
    return CertificateCheck(worst >= -tol, float(worst), witness, False, checked)


def product_candidate(rates: Callable[[int], float], alpha: float, terms: int = 2000) -> Callable:
    """U(n) = prod_{k>=n} r_k / (r_k + alpha) for a pure-birth chain, in log space."""
    ks = np.arange(terms, dtype=float)
    with np.errstate(over="ignore", divide="ignore"):
        r = np.asarray(rates(ks), dtype=float)
        logs = np.where(np.isinf(r), 0.0, -np.log1p(alpha / r))
    tail = np.concatenate((np.cumsum(logs[::-1])[::-1], [0.0]))

    def u(v, states):
        out = []
        for s in states:
            s = int(s)
            out.append(math.exp(tail[s]) if s < terms else 1.0)
        return np.array(out)
    return u
