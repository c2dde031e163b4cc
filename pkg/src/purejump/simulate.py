"""Monte Carlo sampling of jump paths with time-varying rates.

Every path ``i`` draws from its own stream ``SeedSequence([base_seed, i])``
and consumes uniforms in the same order whether it is simulated alone or
inside a vectorised batch, so estimates do not depend on batching or on the
number of worker threads.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ModelError, NumericsError
from .model import JumpModel, pick_target

CENSORED, CAPPED, ABSORBED = 0, 1, 2
TERMINAL_NAMES = {CENSORED: "censored", CAPPED: "capped", ABSORBED: "absorbed"}

DEFAULT_JUMP_CAP = 10_000
DEFAULT_PATHS = 10_000
BATCH = 2048
CHUNK = 64
INVERSION_RTOL = 1e-12
THINNING_MAX_CANDIDATES = 1_000_000
# a capped path counts as exploding when its last half of sojourns is this
# small relative to the elapsed time (or when time stopped advancing)
COLLAPSE_RATIO = 1e-3


def default_threads() -> int:
    raw = os.environ.get("PUREJUMP_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigurationError(f"PUREJUMP_THREADS must be an integer, got {raw!r}")
    return 1


def path_rng(base_seed: int, path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(base_seed), int(path)]))


class PathStream:
    """Sequential uniforms from one path's generator, drawn in chunks."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self._buf = np.empty(0)
        self._pos = 0

    def block(self, rows: int) -> np.ndarray:
        """The next ``rows`` (u1, u2) pairs."""
        need = 2 * rows
        out = np.empty(need)
        have = len(self._buf) - self._pos
        take = min(have, need)
        out[:take] = self._buf[self._pos:self._pos + take]
        self._pos += take
        if take < need:
            out[take:] = self.rng.random(need - take)
        return out.reshape(rows, 2)

    def uniform(self) -> float:
        if self._pos >= len(self._buf):
            self._buf = self.rng.random(2 * CHUNK)
            self._pos = 0
        u = self._buf[self._pos]
        self._pos += 1
        return float(u)


# --------------------------------------------------------------------------
# sojourns


def _invert_hazard(model: JumpModel, xs, s: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Solve int_s^{s+theta} q_x = E elementwise (theta = inf if never)."""
    n = len(s)
    theta = np.full(n, math.inf)
    with np.errstate(invalid="ignore"):
        live = e < model.hazard_to_infinity_vec(xs, s)
    if not live.any():
        return theta
    idx = np.nonzero(live)[0]
    xl = xs[idx] if isinstance(xs, np.ndarray) else np.asarray(xs)[idx]
    sl, el = s[idx], e[idx]
    q0 = model.total_rate_vec(xl, sl)
    if model.homogeneous:
        with np.errstate(divide="ignore", over="ignore"):
            theta[idx] = el / q0
        return theta
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        guess = np.where(q0 > 0, el / q0, 1.0)
    guess = np.where(np.isfinite(guess) & (guess > 0), guess, 1e-300)
    lo = np.zeros(len(idx))
    hi = guess.copy()
    # grow the bracket until the hazard reaches E
    open_ = np.ones(len(idx), dtype=bool)
    for _ in range(2100):
        k = np.nonzero(open_)[0]
        if k.size == 0:
            break
        h = model.hazard_vec(xl[k], sl[k], sl[k] + hi[k])
        done = h >= el[k]
        lo[k[~done]] = hi[k[~done]]
        hi[k[~done]] *= 2.0
        open_[k[done]] = False
    else:
        raise NumericsError("could not bracket a sojourn time")
    th = np.clip(guess, lo, hi)
    active = np.ones(len(idx), dtype=bool)
    for _ in range(200):
        k = np.nonzero(active)[0]
        if k.size == 0:
            break
        t_k = th[k]
        f = model.hazard_vec(xl[k], sl[k], sl[k] + t_k) - el[k]
        below = f < 0
        lo[k[below]] = t_k[below]
        hi[k[~below]] = t_k[~below]
        q = model.total_rate_vec(xl[k], sl[k] + t_k)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = t_k - f / q
        bad = ~np.isfinite(step) | (step <= lo[k]) | (step >= hi[k])
        step = np.where(bad, 0.5 * (lo[k] + hi[k]), step)
        conv = (np.abs(f) <= INVERSION_RTOL * el[k]) | (hi[k] - lo[k] <= INVERSION_RTOL * hi[k])
        th[k] = np.where(conv, t_k, step)
        active[k[conv]] = False
    else:
        raise NumericsError("sojourn inversion did not converge")
    theta[idx] = th
    return theta


def _thinning_sojourn(model: JumpModel, x, s: float, stream: PathStream) -> float:
    """Sojourn by thinning under a (windowed) rate envelope."""
    t = s
    window = math.inf
    lam_all = model.rate_sup(x, s, math.inf)
    if lam_all == 0:
        return math.inf
    if not math.isfinite(lam_all):
        window = 1.0
    for _ in range(THINNING_MAX_CANDIDATES):
        end = t + window
        lam = model.rate_sup(x, t, end)
        if not math.isfinite(lam):
            raise ModelError(f"thinning needs a finite rate envelope at state {x!r}")
        if lam == 0:
            if model.rate_sup(x, end, math.inf) == 0:
                return math.inf
            t = end
            continue
        cand = t - math.log1p(-stream.uniform()) / lam
        accept_u = stream.uniform()
        if cand > end:
            t = end
            continue
        t = cand
        if accept_u * lam <= model.total_rate(x, t):
            return t - s
    raise NumericsError(f"thinning exceeded {THINNING_MAX_CANDIDATES} candidates at state {x!r}")


def sample_sojourn(model: JumpModel, x, s: float, rng, method: str = "auto") -> float:
    """One holding time in ``x`` entered at time ``s``.

    ``method`` is ``inversion`` (closed-form hazard, bracketed Newton),
    ``thinning`` or ``auto``.  Returns ``inf`` when the remaining hazard is
    finite and never reaches the exponential threshold.
    """
    stream = rng if isinstance(rng, PathStream) else PathStream(rng)
    if method == "auto":
        method = "inversion" if model.has_closed_hazard else "thinning"
    if method == "thinning":
        return _thinning_sojourn(model, x, float(s), stream)
    if method != "inversion":
        raise ConfigurationError(f"unknown sojourn method {method!r}")
    e = -math.log1p(-stream.uniform())
    xs = np.array([x], dtype=object if not isinstance(x, (int, np.integer)) else np.int64)
    return float(_invert_hazard(model, xs, np.array([float(s)]), np.array([e]))[0])


# --------------------------------------------------------------------------
# paths


@dataclass(frozen=True)
class Trajectory:
    """Jump times t_0 < t_1 < ... and visited states x_0, x_1, ...

    ``terminal`` is ``censored`` (alive at the horizon), ``capped`` (jump cap
    reached, or time stopped advancing in floating point) or ``absorbed`` (a
    jump landed in a state with no remaining hazard).
    """

    times: tuple
    states: tuple
    terminal: str
    end_time: float
    explosion_flag: bool
    stalled: bool = False

    @property
    def jumps(self) -> list:
        return list(zip(self.times, self.states))

    @property
    def n_jumps(self) -> int:
        return len(self.times) - 1

    def as_rows(self) -> list:
        return [(float(t), x) for t, x in zip(self.times, self.states)]


@dataclass
class _BatchResult:
    n_jumps: np.ndarray
    end_time: np.ndarray
    half_time: np.ndarray
    final_state: np.ndarray
    terminal: np.ndarray
    stalled: np.ndarray
    records: list | None


def _vectorisable(model: JumpModel) -> bool:
    return bool(model.has_closed_hazard)


def _run_batch(model: JumpModel, x0, s0: float, horizon: float, jump_cap: int,
               streams: list, record: bool = False) -> _BatchResult:
    n = len(streams)
    half = jump_cap // 2
    state_dtype = np.int64 if isinstance(x0, (int, np.integer)) else object
    xs = np.full(n, x0, dtype=state_dtype)
    ts = np.full(n, float(s0))
    n_jumps = np.zeros(n, dtype=np.int64)
    half_time = np.full(n, math.nan)
    terminal = np.full(n, -1, dtype=np.int64)
    stalled = np.zeros(n, dtype=bool)
    records = [([float(s0)], [x0]) for _ in range(n)] if record else None
    if half == 0:
        half_time[:] = s0

    if not _vectorisable(model):
        for i, stream in enumerate(streams):
            _scalar_path(model, i, stream, xs, ts, n_jumps, half_time, terminal, stalled,
                         horizon, jump_cap, half, records)
        return _BatchResult(n_jumps, ts, half_time, xs, terminal, stalled, records)

    active = np.arange(n)
    buf = np.empty((n, CHUNK, 2))
    step = 0
    while active.size:
        row = step % CHUNK
        if row == 0:
            for i in active:
                buf[i] = streams[i].block(CHUNK)
        u1 = buf[active, row, 0]
        u2 = buf[active, row, 1]
        e = -np.log1p(-u1)
        xa, ta = xs[active], ts[active]
        theta = _invert_hazard(model, xa, ta, e)
        tnew = ta + theta
        never = ~np.isfinite(theta)
        censor = never | (tnew > horizon)
        stall = ~censor & (tnew <= ta)
        jump = ~censor & ~stall

        ci = active[censor]
        terminal[ci] = CENSORED
        ts[ci] = horizon

        si = active[stall]
        terminal[si] = CAPPED
        stalled[si] = True
        # time cannot advance: every later jump time rounds to the same value
        half_time[si] = np.where(np.isnan(half_time[si]), ts[si], half_time[si])

        ji = active[jump]
        if ji.size:
            tj = tnew[jump]
            if model.supports_vector_sampling:
                new_x = model.sample_targets_vec(xa[jump], tj, u2[jump])
            else:
                new_x = np.array([pick_target(model.jump_targets(x, float(t)), u)
                                  for x, t, u in zip(xa[jump].tolist(), tj, u2[jump])],
                                 dtype=state_dtype)
            xs[ji] = new_x
            ts[ji] = tj
            n_jumps[ji] += 1
            hit_half = n_jumps[ji] == half
            half_time[ji[hit_half]] = tj[hit_half]
            if record:
                for i, t, x in zip(ji.tolist(), tj.tolist(), np.asarray(new_x).tolist()):
                    records[i][0].append(t)
                    records[i][1].append(x)
            cap = n_jumps[ji] >= jump_cap
            terminal[ji[cap]] = CAPPED
            # landed in a state that will never jump again
            rest = ji[~cap]
            if rest.size:
                dead = model.hazard_to_infinity_vec(xs[rest], ts[rest]) == 0
                terminal[rest[dead]] = ABSORBED
        active = active[terminal[active] < 0]
        step += 1
    return _BatchResult(n_jumps, ts, half_time, xs, terminal, stalled, records)


def _scalar_path(model, i, stream, xs, ts, n_jumps, half_time, terminal, stalled,
                 horizon, jump_cap, half, records):
    x, t = xs[i], float(ts[i])
    while True:
        theta = sample_sojourn(model, x, t, stream, "thinning")
        tnew = t + theta
        if not math.isfinite(theta) or tnew > horizon:
            terminal[i] = CENSORED
            t = horizon
            break
        if tnew <= t:
            terminal[i] = CAPPED
            stalled[i] = True
            if math.isnan(half_time[i]):
                half_time[i] = t
            break
        x = pick_target(model.jump_targets(x, tnew), stream.uniform())
        t = tnew
        n_jumps[i] += 1
        if n_jumps[i] == half:
            half_time[i] = t
        if records is not None:
            records[i][0].append(t)
            records[i][1].append(x)
        if n_jumps[i] >= jump_cap:
            terminal[i] = CAPPED
            break
        if model.rate_sup(x, t, math.inf) == 0:
            terminal[i] = ABSORBED
            break
    xs[i], ts[i] = x, t


def _collapsed(end_time, half_time, s0, stalled) -> np.ndarray:
    """Capped paths whose late sojourns have shrunk to nothing."""
    with np.errstate(invalid="ignore"):
        tail = end_time - half_time
        return stalled | (tail <= COLLAPSE_RATIO * np.maximum(end_time - s0, 1e-300))


def sample_path(model: JumpModel, x0, horizon: float, jump_cap: int = DEFAULT_JUMP_CAP,
                rng=None, s0: float = 0.0) -> Trajectory:
    """Simulate one trajectory from (s0, x0) up to ``horizon``."""
    if not horizon > s0:
        raise ConfigurationError("horizon must exceed the start time")
    if jump_cap < 1:
        raise ConfigurationError("jump_cap must be >= 1")
    if rng is None:
        rng = path_rng(0, 0)
    stream = rng if isinstance(rng, PathStream) else PathStream(rng)
    res = _run_batch(model, x0, s0, horizon, int(jump_cap), [stream], record=True)
    times, states = res.records[0]
    term = int(res.terminal[0])
    flag = bool(term == CAPPED and res.end_time[0] < horizon
                and _collapsed(res.end_time, res.half_time, s0, res.stalled)[0])
    return Trajectory(tuple(times), tuple(states), TERMINAL_NAMES[term], float(res.end_time[0]),
                      flag, bool(res.stalled[0]))


def _simulate_many(model, x0, s0, horizon, jump_cap, paths, base_seed, threads):
    threads = default_threads() if threads is None else max(1, int(threads))
    starts = list(range(0, paths, BATCH))

    def work(start):
        ids = range(start, min(start + BATCH, paths))
        return _run_batch(model, x0, s0, horizon, jump_cap,
                          [PathStream(path_rng(base_seed, i)) for i in ids])

    if threads == 1:
        parts = [work(a) for a in starts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, starts))
    # concatenation in path order keeps every reduction deterministic
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
    return _BatchResult(cat("n_jumps"), cat("end_time"), cat("half_time"), cat("final_state"),
                        cat("terminal"), cat("stalled"), None)


# --------------------------------------------------------------------------
# estimators


@dataclass(frozen=True)
class ExplosionEstimate:
    estimate: float
    stderr: float
    half_cap_estimate: float
    half_cap_stderr: float
    cap_sensitivity_ok: bool
    paths: int
    jump_cap: int
    horizon: float
    capped: int
    stalled: int
    censored: int
    absorbed: int
    base_seed: int
    explosion_times: np.ndarray = field(default_factory=lambda: np.zeros(0), compare=False, repr=False)

    def cdf(self, grid) -> np.ndarray:
        """Fraction of paths whose capped explosion time is <= each grid time."""
        grid = np.asarray(grid, dtype=float)
        return np.searchsorted(self.explosion_times, grid, side="right") / self.paths

    def as_dict(self) -> dict:
        return {
            "estimate": self.estimate, "stderr": self.stderr,
            "cap_diagnostic": {"half_cap": self.jump_cap // 2, "half_cap_estimate": self.half_cap_estimate,
                               "half_cap_stderr": self.half_cap_stderr, "passed": self.cap_sensitivity_ok},
            "paths": self.paths, "jump_cap": self.jump_cap, "horizon": self.horizon,
            "terminals": {"capped": self.capped, "stalled": self.stalled,
                          "censored": self.censored, "absorbed": self.absorbed},
            "seeds": {"base_seed": self.base_seed, "stream": "SeedSequence([base_seed, path])"},
        }


def _binomial(hits: np.ndarray) -> tuple[float, float]:
    n = len(hits)
    p = float(hits.mean())
    return p, math.sqrt(max(p * (1 - p), 0.0) / n)


def explosion_probability(model: JumpModel, x0, horizon: float, paths: int = DEFAULT_PATHS,
                          jump_cap: int = DEFAULT_JUMP_CAP, base_seed: int = 0,
                          threads: int | None = None, s0: float = 0.0) -> ExplosionEstimate:
    """Estimate P(t_inf <= horizon) as the fraction of paths reaching the cap in time.

    The cap-sensitivity diagnostic recomputes the estimate with half the cap
    from the same paths; disagreement beyond two standard errors flags a cap
    that is too small.
    """
    if paths < 100:
        raise ConfigurationError("explosion_probability needs at least 100 paths")
    if jump_cap < 2:
        raise ConfigurationError("jump_cap must be >= 2")
    res = _simulate_many(model, x0, s0, horizon, int(jump_cap), int(paths), base_seed, threads)
    capped = res.terminal == CAPPED
    hits = capped & (res.end_time <= horizon)
    with np.errstate(invalid="ignore"):
        half_hits = ~np.isnan(res.half_time) & (res.half_time <= horizon)
    p, se = _binomial(hits)
    ph, seh = _binomial(half_hits)
    ok = abs(p - ph) <= 2.0 * math.hypot(se, seh) + 1e-15
    return ExplosionEstimate(p, se, ph, seh, bool(ok), int(paths), int(jump_cap), float(horizon),
                             int(capped.sum()), int(res.stalled.sum()),
                             int((res.terminal == CENSORED).sum()), int((res.terminal == ABSORBED).sum()),
                             int(base_seed), np.sort(res.end_time[hits]))


@dataclass(frozen=True)
class MCResolvent:
    estimate: float
    stderr: float
    exploded: int
    unresolved: int
    unresolved_bias_bound: float
    paths: int
    alpha: float
    horizon: float
    jump_cap: int
    base_seed: int

    def as_dict(self) -> dict:
        return {"estimate": self.estimate, "stderr": self.stderr, "exploded": self.exploded,
                "unresolved": self.unresolved, "unresolved_bias_bound": self.unresolved_bias_bound,
                "paths": self.paths, "alpha": self.alpha, "horizon": self.horizon,
                "jump_cap": self.jump_cap, "seeds": {"base_seed": self.base_seed}}


def mc_resolvent(model: JumpModel, alpha: float, x0, paths: int = DEFAULT_PATHS,
                 base_seed: int = 0, jump_cap: int = DEFAULT_JUMP_CAP,
                 horizon: float | None = None, threads: int | None = None) -> MCResolvent:
    """Monte Carlo estimate of alpha * int_0^inf e^{-alpha t} P(0, x0, t, S) dt.

    A path that explodes at t_inf contributes 1 - e^{-alpha t_inf}; paths
    alive at the horizon (or absorbed) contribute 1.  Capped paths whose
    sojourns have not collapsed are counted as alive and their possible bias
    is reported separately.
    """
    if not alpha > 0:
        raise ConfigurationError("alpha must be positive")
    if paths < 2:
        raise ConfigurationError("need at least two paths")
    if horizon is None:
        horizon = 30.0 / alpha
    res = _simulate_many(model, x0, 0.0, horizon, int(jump_cap), int(paths), base_seed, threads)
    capped = res.terminal == CAPPED
    collapsed = capped & _collapsed(res.end_time, res.half_time, 0.0, res.stalled)
    unresolved = capped & ~collapsed
    contrib = np.ones(paths)
    contrib[collapsed] = -np.expm1(-alpha * res.end_time[collapsed])
    est = float(contrib.mean())
    se = float(contrib.std(ddof=1) / math.sqrt(paths))
    bias = float(np.exp(-alpha * res.end_time[unresolved]).sum() / paths)
    return MCResolvent(est, se, int(collapsed.sum()), int(unresolved.sum()), bias, int(paths),
                       float(alpha), float(horizon), int(jump_cap), int(base_seed))


@dataclass(frozen=True)
class Occupation:
    states: tuple
    estimate: np.ndarray
    stderr: np.ndarray
    exploded: float
    paths: int


def occupation(model: JumpModel, x0, t: float, states, paths: int = DEFAULT_PATHS,
               base_seed: int = 0, jump_cap: int = DEFAULT_JUMP_CAP,
               threads: int | None = None) -> Occupation:
    """Empirical P(0, x0, t, {y}) for each y in ``states``."""
    res = _simulate_many(model, x0, 0.0, t, int(jump_cap), int(paths), base_seed, threads)
    alive = res.terminal != CAPPED
    est, se = [], []
    for y in states:
        hits = alive & (res.final_state == y)
        p, s = _binomial(hits)
        est.append(p)
        se.append(s)
    return Occupation(tuple(states), np.array(est), np.array(se), float((~alive).mean()), int(paths))


def sample_paths(model: JumpModel, x0, horizon: float, paths: int, base_seed: int = 0,
                 jump_cap: int = DEFAULT_JUMP_CAP) -> list[Trajectory]:
    """Full trajectories for a handful of paths (path i uses stream (base_seed, i))."""
    return [sample_path(model, x0, horizon, jump_cap, PathStream(path_rng(base_seed, i)))
            for i in range(int(paths))]
