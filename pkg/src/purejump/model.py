"""State spaces, Q-functions, drift functions and set sequences.

Everything downstream consumes the immutable objects defined here.  States of
a countable space are nonnegative integers; a few reserved cemetery states
(see :data:`DELTA`) may be appended to a space by wrappers such as the
f-transform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse

from . import _quad
from .errors import ConfigurationError, ModelError, UnsupportedSpaceError

TAIL_SLACK = 1e-12


class Cemetery:
    """An isolated absorbing point that never collides with an integer state."""

    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name

    def __reduce__(self):
        return (_cemetery, (self.name,))


_CEMETERIES: dict[str, Cemetery] = {}


def _cemetery(name: str) -> Cemetery:
    if name not in _CEMETERIES:
        _CEMETERIES[name] = Cemetery(name)
    return _CEMETERIES[name]


DELTA = _cemetery("delta")


# --------------------------------------------------------------------------
# state spaces


@dataclass(frozen=True)
class StateSpace:
    """A countable enumeration ``0, 1, 2, ...`` (optionally finite) or an
    opaque sampler-defined space.

    ``extra`` holds reserved cemetery states appended after the enumerated
    part of every truncation.
    """

    kind: str = "countable"
    size: int | None = None
    truncation_default: int = 50
    extra: tuple = ()
    display: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("countable", "sampler"):
            raise ModelError(f"unknown state space kind {self.kind!r}")
        if self.truncation_default < 1:
            raise ModelError("truncation_default must be positive")
        if self.size is not None and self.size < 1:
            raise ModelError("a finite space needs at least one state")

    @property
    def countable(self) -> bool:
        return self.kind == "countable"

    def require_countable(self, operation: str) -> None:
        if not self.countable:
            raise UnsupportedSpaceError(
                f"{operation} needs an enumerable state space; sampler-defined "
                "spaces support simulation only"
            )

    def base_count(self, truncation: int | None = None) -> int:
        n = self.truncation_default if truncation is None else int(truncation)
        if n < 1:
            raise ModelError("truncation must be >= 1")
        if self.size is not None:
            n = min(n, self.size)
        return n

    def states(self, truncation: int | None = None) -> list:
        self.require_countable("enumeration")
        return list(range(self.base_count(truncation))) + list(self.extra)

    def index(self, state, truncation: int | None = None) -> int | None:
        """Position of ``state`` inside the truncated enumeration, or None."""
        n = self.base_count(truncation)
        if isinstance(state, Cemetery):
            for k, e in enumerate(self.extra):
                if e is state:
                    return n + k
            return None
        state = int(state)
        if 0 <= state < n:
            return state
        return None

    def with_extra(self, *cemeteries: Cemetery) -> "StateSpace":
        return StateSpace(self.kind, self.size, self.truncation_default,
                          self.extra + tuple(cemeteries), self.display)

    def describe(self, state) -> str:
        if self.display is not None:
            return str(self.display(state))
        return repr(state)


# --------------------------------------------------------------------------
# time modulation


@dataclass(frozen=True)
class Modulation:
    """A positive time factor g(t) with a closed-form integral.

    Families: ``constant``, ``affine`` (1+bt), ``exponential`` (exp(bt)),
    ``periodic`` (1+b sin(wt)), ``piecewise`` (piecewise-constant).
    """

    family: str = "constant"
    params: tuple = ()

    def __post_init__(self):
        p = self.p
        fam = self.family
        if fam == "constant":
            pass
        elif fam == "affine":
            if p.get("b", 0.0) < 0:
                raise ModelError("affine modulation needs b >= 0 to stay positive")
        elif fam == "exponential":
            if not math.isfinite(p.get("b", 0.0)):
                raise ModelError("exponential modulation needs a finite b")
        elif fam == "periodic":
            if not abs(p.get("b", 0.0)) < 1:
                raise ModelError("periodic modulation needs |b| < 1")
            if p.get("omega", 1.0) <= 0:
                raise ModelError("periodic modulation needs omega > 0")
        elif fam == "piecewise":
            breaks = list(p.get("breaks", ()))
            values = list(p.get("values", (1.0,)))
            if len(values) != len(breaks) + 1:
                raise ModelError("piecewise modulation needs len(values) == len(breaks) + 1")
            if any(v <= 0 for v in values):
                raise ModelError("piecewise modulation values must be positive")
            if any(b <= a for a, b in zip(breaks, breaks[1:])) or any(b <= 0 for b in breaks):
                raise ModelError("piecewise breakpoints must be positive and increasing")
        else:
            raise ModelError(f"unknown modulation family {fam!r}")

    @classmethod
    def make(cls, family: str = "constant", **params) -> "Modulation":
        frozen = tuple(sorted((k, tuple(v) if isinstance(v, (list, tuple)) else float(v))
                              for k, v in params.items()))
        return cls(family, frozen)

    @property
    def p(self) -> dict:
        return dict(self.params)

    def as_dict(self) -> dict:
        return {"family": self.family,
                "params": {k: list(v) if isinstance(v, tuple) else v for k, v in self.params}}

    # g and its integral --------------------------------------------------

    def value(self, t):
        t = np.asarray(t, dtype=float)
        p = self.p
        fam = self.family
        if fam == "constant":
            out = np.ones_like(t)
        elif fam == "affine":
            out = 1.0 + p.get("b", 0.0) * t
        elif fam == "exponential":
            out = np.exp(p.get("b", 0.0) * t)
        elif fam == "periodic":
            out = 1.0 + p.get("b", 0.0) * np.sin(p.get("omega", 1.0) * t)
        else:
            breaks = np.asarray(p.get("breaks", ()), dtype=float)
            values = np.asarray(p.get("values", (1.0,)), dtype=float)
            out = values[np.searchsorted(breaks, t, side="right")]
        return out if out.ndim else float(out)

    def primitive(self, t):
        """G(t) = integral of g over [0, t]."""
        t = np.asarray(t, dtype=float)
        p = self.p
        fam = self.family
        if fam == "constant":
            out = t.copy()
        elif fam == "affine":
            out = t + 0.5 * p.get("b", 0.0) * t * t
        elif fam == "exponential":
            b = p.get("b", 0.0)
            out = t.copy() if b == 0 else np.expm1(b * t) / b
        elif fam == "periodic":
            b, om = p.get("b", 0.0), p.get("omega", 1.0)
            out = t + (b / om) * (1.0 - np.cos(om * t))
        else:
            breaks = np.asarray(p.get("breaks", ()), dtype=float)
            values = np.asarray(p.get("values", (1.0,)), dtype=float)
            edges = np.concatenate(([0.0], breaks))
            cum = np.concatenate(([0.0], np.cumsum(np.diff(edges) * values[:-1])))
            k = np.searchsorted(breaks, t, side="right")
            out = cum[k] + values[k] * (t - edges[k])
        return out if out.ndim else float(out)

    def integral(self, s, t):
        return np.asarray(self.primitive(t)) - np.asarray(self.primitive(s)) \
            if np.ndim(s) or np.ndim(t) else self.primitive(t) - self.primitive(s)

    def total_from(self, s: float) -> float:
        """Integral of g over [s, inf)."""
        if self.family == "exponential" and self.p.get("b", 0.0) < 0:
            b = self.p["b"]
            return math.exp(b * s) / -b
        return math.inf

    def sup(self, a: float = 0.0, b: float = math.inf) -> float:
        p = self.p
        fam = self.family
        if fam == "constant":
            return 1.0
        if fam == "affine":
            return 1.0 + p.get("b", 0.0) * b if p.get("b", 0.0) > 0 else 1.0
        if fam == "exponential":
            k = p.get("b", 0.0)
            return math.exp(k * b) if k > 0 else math.exp(k * a)
        if fam == "periodic":
            return 1.0 + abs(p.get("b", 0.0))
        breaks = list(p.get("breaks", ()))
        values = list(p.get("values", (1.0,)))
        edges = [0.0] + breaks + [math.inf]
        return max(v for v, lo, hi in zip(values, edges[:-1], edges[1:]) if hi > a and lo <= b)

    def inf(self, a: float = 0.0, b: float = math.inf) -> float:
        p = self.p
        fam = self.family
        if fam == "constant":
            return 1.0
        if fam == "affine":
            return 1.0 + p.get("b", 0.0) * a
        if fam == "exponential":
            k = p.get("b", 0.0)
            return math.exp(k * a) if k >= 0 else math.exp(k * b)
        if fam == "periodic":
            return 1.0 - abs(p.get("b", 0.0))
        breaks = list(p.get("breaks", ()))
        values = list(p.get("values", (1.0,)))
        edges = [0.0] + breaks + [math.inf]
        return min(v for v, lo, hi in zip(values, edges[:-1], edges[1:]) if hi > a and lo <= b)

    @property
    def constant_after(self) -> float | None:
        """Time after which g is constant, or None if it never settles."""
        if self.family == "constant":
            return 0.0
        if self.family == "piecewise":
            breaks = self.p.get("breaks", ())
            return float(breaks[-1]) if breaks else 0.0
        if self.family in ("affine", "exponential") and self.p.get("b", 0.0) == 0:
            return 0.0
        return None

    @property
    def nondecreasing(self) -> bool:
        if self.family in ("constant", "affine"):
            return True
        if self.family == "exponential":
            return self.p.get("b", 0.0) >= 0
        if self.family == "piecewise":
            v = self.p.get("values", (1.0,))
            return all(b >= a for a, b in zip(v, v[1:]))
        return False


CONSTANT = Modulation()


# --------------------------------------------------------------------------
# rate laws


@dataclass(frozen=True)
class RateLaw:
    """A per-state rate n -> r(n) from a small parametric family."""

    law: str = "zero"
    a: float = 0.0
    b: float = 0.0

    def __post_init__(self):
        if self.law not in ("zero", "constant", "linear", "geometric", "power"):
            raise ModelError(f"unknown rate law {self.law!r}")
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise ModelError("rate law parameters must be finite")
        if self.law == "constant" and self.a < 0:
            raise ModelError("negative rate")
        if self.law == "linear" and (self.a < 0 or self.b < 0):
            raise ModelError("negative rate")
        if self.law in ("geometric", "power") and (self.a < 0 or (self.law == "geometric" and self.b < 0)):
            raise ModelError("negative rate")

    def __call__(self, n):
        n = np.asarray(n, dtype=float)
        if self.law == "zero":
            out = np.zeros_like(n)
        elif self.law == "constant":
            out = np.full_like(n, self.a)
        elif self.law == "linear":
            out = self.a + self.b * n
        elif self.law == "geometric":
            with np.errstate(over="ignore"):
                out = self.a * np.power(self.b, n)
        else:
            out = self.a * np.power(n + 1.0, self.b)
        return out if out.ndim else float(out)

    def as_dict(self) -> dict:
        if self.law == "zero":
            return {"law": "zero"}
        if self.law == "constant":
            return {"law": "constant", "value": self.a}
        if self.law == "linear":
            return {"law": "linear", "a": self.a, "b": self.b}
        if self.law == "geometric":
            return {"law": "geometric", "a": self.a, "ratio": self.b}
        return {"law": "power", "a": self.a, "p": self.b}

    @classmethod
    def from_dict(cls, spec) -> "RateLaw":
        if isinstance(spec, (int, float)):
            return cls("constant", float(spec))
        law = spec.get("law", "zero")
        if law == "zero":
            return cls("zero")
        if law == "constant":
            return cls("constant", float(spec["value"]))
        if law == "linear":
            return cls("linear", float(spec.get("a", 0.0)), float(spec.get("b", 0.0)))
        if law == "geometric":
            return cls("geometric", float(spec.get("a", 1.0)), float(spec["ratio"]))
        if law == "power":
            return cls("power", float(spec.get("a", 1.0)), float(spec["p"]))
        raise ModelError(f"unknown rate law {law!r}")


# --------------------------------------------------------------------------
# truncated rate structure


@dataclass(frozen=True)
class RateArrays:
    """Rates of a model restricted to a truncation at one time point.

    ``offdiag[i, j]`` is the rate from enumerated state i to state j,
    ``exit[i]`` the rate from i to states outside the truncation and
    ``total[i]`` the total jump rate q_x(t) (= row sum + exit + tail).
    """

    states: tuple
    offdiag: sparse.csr_matrix
    exit: np.ndarray
    total: np.ndarray

    @property
    def size(self) -> int:
        return len(self.states)

    def generator(self) -> sparse.csr_matrix:
        """Signed generator on the truncation (exit mass leaves the system)."""
        return (self.offdiag - sparse.diags(self.total)).tocsr()


@dataclass(frozen=True)
class Factorization:
    """Rates on a truncation of the form g(t) * (fixed arrays)."""

    offdiag: sparse.csr_matrix
    exit: np.ndarray
    total: np.ndarray
    scale: Callable

    def at_unit(self) -> RateArrays:
        return RateArrays(tuple(range(len(self.total))), self.offdiag, self.exit, self.total)

    def at(self, t: float) -> RateArrays:
        g = float(self.scale(t))
        return RateArrays(tuple(range(len(self.total))), (self.offdiag * g).tocsr(),
                          self.exit * g, self.total * g)


# --------------------------------------------------------------------------
# jump models


class JumpModel:
    """A conservative stable Q-function on a state space.

    Subclasses provide :meth:`total_rate`, :meth:`jump_targets` and
    :meth:`rate_bound`; everything else has generic fallbacks.  Instances are
    immutable after construction.
    """

    space: StateSpace
    homogeneous: bool = False
    name: str = "model"
    has_closed_hazard: bool = False

    # -- required ----------------------------------------------------------

    def total_rate(self, x, t: float) -> float:
        raise NotImplementedError

    def jump_targets(self, x, t: float, truncation: int | None = None) -> list:
        raise NotImplementedError

    def rate_bound(self, x) -> float:
        raise NotImplementedError

    # -- optional ----------------------------------------------------------

    def rate_sup(self, x, a: float, b: float) -> float:
        """Upper bound for q_x on [a, b]; defaults to :meth:`rate_bound`."""
        return self.rate_bound(x)

    def tail_mass(self, x, t: float, truncation: int | None = None) -> float:
        """Rate mass that :meth:`jump_targets` leaves out at this truncation."""
        return 0.0

    @property
    def constant_after(self) -> float | None:
        """Time after which all rates are constant in time (None: never)."""
        return 0.0 if self.homogeneous else None

    @property
    def nondecreasing_in_time(self) -> bool:
        return self.homogeneous

    def time_breaks(self) -> list:
        """Times where rates may jump; integrators restart there."""
        return []

    def factorized(self, truncation: int | None = None) -> Factorization | None:
        """Time-separable view of the truncated rates, when one exists."""
        return None

    def hazard(self, x, s: float, t: float) -> float:
        """Integral of q_x over [s, t]."""
        if t <= s:
            return 0.0
        if self.homogeneous:
            return self.total_rate(x, s) * (t - s)
        pieces = max(1, int(math.ceil((t - s) / 1.0)))
        return _quad.integrate(lambda v: np.array([self.total_rate(x, float(u)) for u in v]),
                               s, t, 16, pieces)

    def hazard_vec(self, xs, s, t):
        xs = np.asarray(xs)
        s = np.broadcast_to(np.asarray(s, dtype=float), xs.shape)
        t = np.broadcast_to(np.asarray(t, dtype=float), xs.shape)
        return np.array([self.hazard(x, a, b) for x, a, b in zip(xs.tolist(), s, t)])

    def hazard_to_infinity_vec(self, xs, s):
        """Integral of q_x over [s, inf); infinite unless declared otherwise."""
        xs = np.asarray(xs)
        s = np.broadcast_to(np.asarray(s, dtype=float), xs.shape)
        return np.array([0.0 if self.rate_sup(x, a, math.inf) == 0 else math.inf
                         for x, a in zip(xs.tolist(), s)])

    def total_rate_vec(self, xs, t):
        xs = np.asarray(xs)
        t = np.broadcast_to(np.asarray(t, dtype=float), xs.shape)
        return np.array([self.total_rate(x, b) for x, b in zip(xs.tolist(), t)])

    def rate_arrays(self, t: float, truncation: int | None = None) -> RateArrays:
        """Rates on the truncated enumeration at time t (generic loop)."""
        self.space.require_countable("rate_arrays")
        states = self.space.states(truncation)
        n = len(states)
        rows, cols, vals = [], [], []
        exit_ = np.zeros(n)
        total = np.zeros(n)
        for i, x in enumerate(states):
            total[i] = self.total_rate(x, t)
            for y, r in self.jump_targets(x, t, truncation):
                j = self.space.index(y, truncation)
                if j is None:
                    exit_[i] += r
                else:
                    rows.append(i)
                    cols.append(j)
                    vals.append(r)
            exit_[i] += self.tail_mass(x, t, truncation)
        off = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        return RateArrays(tuple(states), off, exit_, total)

    def describe(self) -> dict:
        return {"name": self.name, "homogeneous": self.homogeneous}

    # vectorised simulation hooks (optional) -------------------------------

    supports_vector_sampling: bool = False

    def sample_targets_vec(self, xs, t, u):
        """Next states given uniforms ``u``; generic per-element fallback."""
        out = np.empty(len(xs), dtype=object)
        for k, (x, tt, uu) in enumerate(zip(np.asarray(xs).tolist(),
                                            np.broadcast_to(t, np.shape(xs)),
                                            np.asarray(u))):
            out[k] = pick_target(self.jump_targets(x, float(tt)), uu)
        return out


def pick_target(targets: Sequence, u: float):
    """Inverse-CDF draw from a finite list of (state, rate) pairs."""
    total = math.fsum(r for _, r in targets)
    if total <= 0:
        raise ModelError("cannot draw a jump target from a zero-rate state")
    acc = 0.0
    level = u * total
    for y, r in targets:
        acc += r
        if level < acc:
            return y
    return targets[-1][0]


class FunctionModel(JumpModel):
    """A model assembled from plain callables (the programmatic API).

    ``jump_targets(x, t)`` must return a finite list of (state, rate).
    """

    def __init__(self, space: StateSpace, total_rate: Callable, jump_targets: Callable,
                 rate_bound: Callable, hazard: Callable | None = None,
                 homogeneous: bool = False, name: str = "function-model",
                 tail_mass: Callable | None = None, rate_sup: Callable | None = None,
                 constant_after: float | None = None):
        self.space = space
        self._total = total_rate
        self._targets = jump_targets
        self._bound = rate_bound
        self._hazard = hazard
        self._tail = tail_mass
        self._sup = rate_sup
        self._constant_after = constant_after
        self.homogeneous = homogeneous
        self.has_closed_hazard = hazard is not None
        self.name = name

    def total_rate(self, x, t):
        return float(self._total(x, t))

    def jump_targets(self, x, t, truncation=None):
        return [(y, float(r)) for y, r in self._targets(x, t)]

    def rate_bound(self, x):
        return float(self._bound(x))

    def rate_sup(self, x, a, b):
        if self._sup is not None:
            return float(self._sup(x, a, b))
        return self.rate_bound(x)

    def tail_mass(self, x, t, truncation=None):
        return float(self._tail(x, t, truncation)) if self._tail else 0.0

    def hazard(self, x, s, t):
        if self._hazard is not None:
            return float(self._hazard(x, s, t))
        return super().hazard(x, s, t)

    @property
    def constant_after(self):
        if self._constant_after is not None:
            return self._constant_after
        return 0.0 if self.homogeneous else None


class ModulatedModel(JumpModel):
    """Homogeneous base rates multiplied by a common time factor g(t).

    q(dy|x,t) = g(t) * q0(dy|x).  The jump distribution is therefore time
    independent, and hazards are ``q0_x * (G(t) - G(s))`` in closed form.
    """

    has_closed_hazard = True
    supports_vector_sampling = True

    def __init__(self, space: StateSpace, modulation: Modulation = CONSTANT, name: str = "model"):
        self.space = space
        self.modulation = modulation
        self.homogeneous = modulation.constant_after == 0.0 and modulation.value(0.0) == 1.0
        self.name = name
        self._cache: dict = {}

    # subclasses supply these two
    def base_targets(self, x) -> list:
        raise NotImplementedError

    def base_total_vec(self, xs) -> np.ndarray:
        raise NotImplementedError

    def base_arrays(self, n: int) -> tuple[sparse.csr_matrix, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def base_total(self, x) -> float:
        return float(self.base_total_vec(np.array([x]))[0])

    def total_rate(self, x, t):
        return self.base_total(x) * float(self.modulation.value(t))

    def total_rate_vec(self, xs, t):
        return self.base_total_vec(np.asarray(xs)) * self.modulation.value(t)

    def jump_targets(self, x, t, truncation=None):
        g = float(self.modulation.value(t))
        return [(y, r * g) for y, r in self.base_targets(x)]

    def rate_bound(self, x):
        base = self.base_total(x)
        if base == 0:
            return 0.0
        return base * self.modulation.sup()

    def rate_sup(self, x, a, b):
        base = self.base_total(x)
        return 0.0 if base == 0 else base * self.modulation.sup(a, b)

    def hazard(self, x, s, t):
        if t <= s:
            return 0.0
        base = self.base_total(x)
        if base == 0:
            return 0.0
        if math.isinf(t):
            return base * self.modulation.total_from(s)
        return base * float(self.modulation.integral(s, t))

    def hazard_vec(self, xs, s, t):
        base = self.base_total_vec(np.asarray(xs))
        with np.errstate(invalid="ignore"):
            out = base * (np.asarray(self.modulation.primitive(t)) - np.asarray(self.modulation.primitive(s)))
        return np.where(base == 0, 0.0, out)

    def hazard_to_infinity_vec(self, xs, s):
        base = self.base_total_vec(np.asarray(xs))
        s = np.broadcast_to(np.asarray(s, dtype=float), base.shape)
        mod = self.modulation
        if mod.family == "exponential" and mod.p.get("b", 0.0) < 0:
            k = mod.p["b"]
            tail = np.exp(k * s) / -k
        else:
            tail = np.full(base.shape, math.inf)
        with np.errstate(invalid="ignore"):
            return np.where(base == 0, 0.0, base * tail)

    @property
    def constant_after(self):
        return self.modulation.constant_after

    @property
    def nondecreasing_in_time(self):
        return self.modulation.nondecreasing

    def time_breaks(self):
        if self.modulation.family == "piecewise":
            return [float(b) for b in self.modulation.p.get("breaks", ())]
        return []

    def _base(self, n: int):
        key = n
        hit = self._cache.get(key)
        if hit is None:
            hit = self.base_arrays(n)
            self._cache[key] = hit
        return hit

    def factorized(self, truncation=None):
        n = self.space.base_count(truncation)
        off, exit_, total = self._base(n)
        return Factorization(off, exit_, total, self.modulation.value)

    def rate_arrays(self, t, truncation=None):
        self.space.require_countable("rate_arrays")
        n = self.space.base_count(truncation)
        off, exit_, total = self._base(n)
        g = float(self.modulation.value(t))
        return RateArrays(tuple(range(n)), (off * g).tocsr(), exit_ * g, total * g)

    def describe(self):
        return {"name": self.name, "homogeneous": self.homogeneous,
                "modulation": self.modulation.as_dict()}


class BirthDeathModel(ModulatedModel):
    """Birth-death chain on {0, 1, ...} (optionally capped at ``size`` states)."""

    def __init__(self, birth: RateLaw, death: RateLaw, modulation: Modulation = CONSTANT,
                 space: StateSpace | None = None, name: str = "birth-death"):
        super().__init__(space or StateSpace(), modulation, name)
        if not self.space.countable:
            raise ModelError("birth-death models live on a countable space")
        self.birth = birth
        self.death = death

    def _birth_vec(self, xs):
        b = np.asarray(self.birth(xs), dtype=float)
        if self.space.size is not None:
            b = np.where(np.asarray(xs) >= self.space.size - 1, 0.0, b)
        return b

    def _death_vec(self, xs):
        d = np.asarray(self.death(xs), dtype=float)
        return np.where(np.asarray(xs) <= 0, 0.0, d)

    def base_targets(self, x):
        x = int(x)
        out = []
        b = float(self._birth_vec(np.array([x]))[0])
        d = float(self._death_vec(np.array([x]))[0])
        if b > 0:
            out.append((x + 1, b))
        if d > 0:
            out.append((x - 1, d))
        return out

    def base_total_vec(self, xs):
        xs = np.asarray(xs)
        return self._birth_vec(xs) + self._death_vec(xs)

    def base_arrays(self, n):
        idx = np.arange(n)
        b = self._birth_vec(idx)
        d = self._death_vec(idx)
        up_rows = idx[:-1]
        dn_rows = idx[1:]
        rows = np.concatenate((up_rows, dn_rows))
        cols = np.concatenate((up_rows + 1, dn_rows - 1))
        vals = np.concatenate((b[:-1], d[1:]))
        keep = vals > 0
        off = sparse.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))
        exit_ = np.zeros(n)
        exit_[-1] = b[-1]
        return off, exit_, b + d

    def sample_targets_vec(self, xs, t, u):
        xs = np.asarray(xs, dtype=np.int64)
        b = self._birth_vec(xs)
        tot = b + self._death_vec(xs)
        return np.where(u * tot < b, xs + 1, xs - 1)

    def describe(self):
        d = super().describe()
        d.update(family="birth_death", birth=self.birth.as_dict(), death=self.death.as_dict())
        return d


class MatrixModel(ModulatedModel):
    """Finite-state model given by an off-diagonal rate matrix."""

    def __init__(self, rates, modulation: Modulation = CONSTANT, name: str = "matrix",
                 truncation_default: int | None = None):
        r = np.array(rates, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ModelError("rate matrix must be square")
        if not np.all(np.isfinite(r)) or np.any(r < 0):
            raise ModelError("rates must be finite and nonnegative")
        np.fill_diagonal(r, 0.0)
        n = r.shape[0]
        super().__init__(StateSpace("countable", n, truncation_default or n), modulation, name)
        self.rates = r
        self.rates.flags.writeable = False
        self._cum = np.cumsum(r, axis=1)

    def base_targets(self, x):
        x = int(x)
        return [(j, float(v)) for j, v in enumerate(self.rates[x]) if v > 0]

    def base_total_vec(self, xs):
        return self.rates.sum(axis=1)[np.asarray(xs, dtype=np.int64)]

    def base_arrays(self, n):
        sub = self.rates[:n, :n]
        exit_ = self.rates[:n, n:].sum(axis=1)
        return sparse.csr_matrix(sub), exit_, self.rates[:n].sum(axis=1)

    def sample_targets_vec(self, xs, t, u):
        xs = np.asarray(xs, dtype=np.int64)
        cum = self._cum[xs]
        level = u * cum[:, -1]
        return np.minimum((cum <= level[:, None]).sum(axis=1), self.rates.shape[0] - 1)

    def describe(self):
        d = super().describe()
        d.update(family="matrix", rates=self.rates.tolist())
        return d


class FrozenModel(JumpModel):
    """q^(m): the base Q-function with every state outside S_m made absorbing."""

    def __init__(self, base: JumpModel, keep: Callable[[object], bool], label: str = ""):
        self.base = base
        self.keep = keep
        self.space = base.space
        self.homogeneous = base.homogeneous
        self.has_closed_hazard = base.has_closed_hazard
        self.name = f"{base.name}|frozen{label}"

    def total_rate(self, x, t):
        return self.base.total_rate(x, t) if self.keep(x) else 0.0

    def jump_targets(self, x, t, truncation=None):
        return self.base.jump_targets(x, t, truncation) if self.keep(x) else []

    def rate_bound(self, x):
        return self.base.rate_bound(x) if self.keep(x) else 0.0

    def rate_sup(self, x, a, b):
        return self.base.rate_sup(x, a, b) if self.keep(x) else 0.0

    def hazard(self, x, s, t):
        return self.base.hazard(x, s, t) if self.keep(x) else 0.0

    @property
    def constant_after(self):
        return self.base.constant_after

    def time_breaks(self):
        return self.base.time_breaks()

    def factorized(self, truncation=None):
        fac = self.base.factorized(truncation)
        if fac is None:
            return None
        states = self.space.states(truncation)
        mask = np.array([bool(self.keep(x)) for x in states], dtype=float)
        return Factorization((sparse.diags(mask) @ fac.offdiag).tocsr(), fac.exit * mask,
                             fac.total * mask, fac.scale)

    def rate_arrays(self, t, truncation=None):
        arr = self.base.rate_arrays(t, truncation)
        mask = np.array([bool(self.keep(x)) for x in arr.states], dtype=float)
        return RateArrays(arr.states, sparse.diags(mask) @ arr.offdiag,
                          arr.exit * mask, arr.total * mask)


def prefix_frozen(model: JumpModel, m: int) -> FrozenModel:
    """Freeze every integer state >= m (the default prefix sets S_m = {0..m-1})."""
    return FrozenModel(model, lambda x: isinstance(x, (int, np.integer)) and 0 <= x < m, f"<{m}")


class StoppedModel(JumpModel):
    """The Q-function switched off after time T: q(.|x,t) I{t <= T}."""

    def __init__(self, base: JumpModel, horizon: float):
        self.base = base
        self.horizon = float(horizon)
        self.space = base.space
        self.homogeneous = False
        self.has_closed_hazard = base.has_closed_hazard
        self.name = f"{base.name}|stopped@{horizon:g}"

    def total_rate(self, x, t):
        return self.base.total_rate(x, t) if t <= self.horizon else 0.0

    def total_rate_vec(self, xs, t):
        t = np.asarray(t, dtype=float)
        return np.where(t <= self.horizon, self.base.total_rate_vec(xs, np.minimum(t, self.horizon)), 0.0)

    def jump_targets(self, x, t, truncation=None):
        return self.base.jump_targets(x, t, truncation) if t <= self.horizon else []

    def rate_bound(self, x):
        return self.base.rate_sup(x, 0.0, self.horizon)

    def rate_sup(self, x, a, b):
        if a > self.horizon:
            return 0.0
        return self.base.rate_sup(x, a, min(b, self.horizon))

    def hazard(self, x, s, t):
        return self.base.hazard(x, min(s, self.horizon), min(t, self.horizon))

    def hazard_vec(self, xs, s, t):
        h = self.horizon
        return self.base.hazard_vec(xs, np.minimum(s, h), np.minimum(t, h))

    def hazard_to_infinity_vec(self, xs, s):
        return self.hazard_vec(xs, s, self.horizon)

    @property
    def constant_after(self):
        return self.horizon

    def time_breaks(self):
        return sorted(set([b for b in self.base.time_breaks() if b < self.horizon] + [self.horizon]))

    def factorized(self, truncation=None):
        fac = self.base.factorized(truncation)
        if fac is None:
            return None
        g, h = fac.scale, self.horizon

        def scale(t):
            t = np.asarray(t, dtype=float)
            out = np.where(t <= h, g(np.minimum(t, h)), 0.0)
            return out if out.ndim else float(out)
        return Factorization(fac.offdiag, fac.exit, fac.total, scale)

    def rate_arrays(self, t, truncation=None):
        arr = self.base.rate_arrays(min(t, self.horizon), truncation)
        if t <= self.horizon:
            return arr
        n = arr.size
        return RateArrays(arr.states, sparse.csr_matrix((n, n)), np.zeros(n), np.zeros(n))


# --------------------------------------------------------------------------
# constructors


def build_birth_death(birth, death=None, time_modulation: Modulation | None = None,
                      size: int | None = None, truncation_default: int = 50,
                      name: str = "birth-death") -> BirthDeathModel:
    """Birth-death model with q_n(t) = (birth_n + death_n) g(t).

    ``birth``/``death`` are :class:`RateLaw` instances or dicts accepted by
    :meth:`RateLaw.from_dict`.
    """
    birth = birth if isinstance(birth, RateLaw) else RateLaw.from_dict(birth)
    if death is None:
        death = RateLaw("zero")
    death = death if isinstance(death, RateLaw) else RateLaw.from_dict(death)
    space = StateSpace("countable", size, truncation_default)
    return BirthDeathModel(birth, death, time_modulation or CONSTANT, space, name)


def yule(truncation_default: int = 50, modulation: Modulation | None = None) -> BirthDeathModel:
    """Pure birth with rate n + 1 in state n."""
    return build_birth_death(RateLaw("linear", 1.0, 1.0), None, modulation,
                             truncation_default=truncation_default, name="yule")


def geometric_birth(ratio: float = 2.0, truncation_default: int = 30) -> BirthDeathModel:
    """Pure birth with rate ratio**n; explosive for ratio > 1."""
    return build_birth_death(RateLaw("geometric", 1.0, ratio), None, None,
                             truncation_default=truncation_default, name=f"birth-{ratio:g}^n")


def flip_flop(a: float = 1.0, b: float = 2.0) -> MatrixModel:
    return MatrixModel([[0.0, a], [b, 0.0]], name="flip-flop")


def zero_rate(truncation_default: int = 10) -> BirthDeathModel:
    return build_birth_death(RateLaw("zero"), None, truncation_default=truncation_default, name="zero-rate")


# --------------------------------------------------------------------------
# drift functions and set sequences


@dataclass(frozen=True)
class DriftFunction:
    """A test function V(v, x) (or f(x)) with its constant.

    ``kind`` is ``"cdrift"`` (strictly positive, constant c) or
    ``"condition"`` (nonnegative, constant alpha).  ``value`` must accept a
    numpy array of states and a scalar time.
    """

    value: Callable
    constant: float = 0.0
    kind: str = "condition"
    time_derivative: Callable | None = None
    time_dependent: bool = False
    upper_bound: float | None = None
    label: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.kind not in ("cdrift", "condition"):
            raise ModelError(f"unknown drift kind {self.kind!r}")
        if self.constant < 0 or not math.isfinite(self.constant):
            raise ModelError("drift constant must be finite and nonnegative")

    def __call__(self, x, v: float = 0.0):
        return self.value(x, v)

    def at(self, xs, v: float = 0.0) -> np.ndarray:
        return np.asarray(self.value(np.asarray(xs), v), dtype=float)

    def dv(self, xs, v: float, step: float = 1e-5) -> tuple[np.ndarray, float]:
        """Time derivative and the disagreement of its cross-check.

        Analytic when supplied; otherwise central differences at ``step``
        compared against ``2*step``.
        """
        xs = np.asarray(xs)
        if not self.time_dependent:
            return np.zeros(xs.shape), 0.0
        if self.time_derivative is not None:
            exact = np.asarray(self.time_derivative(xs, v), dtype=float)
            fd = _central(self, xs, v, step)
            return exact, float(np.max(np.abs(exact - fd) / np.maximum(1.0, np.abs(exact)), initial=0.0))
        d1 = _central(self, xs, v, step)
        d2 = _central(self, xs, v, 2 * step)
        return d1, float(np.max(np.abs(d1 - d2) / np.maximum(1.0, np.abs(d1)), initial=0.0))

    def describe(self) -> dict:
        return dict(self.label) or {"kind": self.kind, "constant": self.constant}


def _central(f: DriftFunction, xs, v, h):
    lo = max(v - h, 0.0)
    hi = v + h
    return (f.at(xs, hi) - f.at(xs, lo)) / (hi - lo)


def _state_array(x):
    """Integer view of states; cemeteries map to -1 (callers mask them)."""
    arr = np.asarray(x, dtype=object) if np.ndim(x) else np.asarray([x], dtype=object)
    out = np.array([-1 if isinstance(s, Cemetery) else int(s) for s in arr.ravel()], dtype=float)
    return out.reshape(arr.shape) if np.ndim(x) else out[0]


def drift_function(expr_family: str, params: dict | None = None, constant: float = 0.0,
                   kind: str = "condition", time_factor: dict | None = None) -> DriftFunction:
    """Build V or f from a parametric family.

    Families (n is the state):
      ``constant``   value
      ``linear``     a + b n
      ``geometric``  a + b r^n           (e.g. 2 - 2^-n: a=2, b=-1, r=0.5)
      ``power``      a (n+1)^p
      ``alternating`` (-1)^n (a + b n)
    An optional ``time_factor`` ``{"rate": k}`` multiplies by exp(k v).
    """
    p = dict(params or {})
    fam = expr_family

    if fam == "constant":
        val = float(p.get("value", 1.0))

        def base(n):
            return np.full(np.shape(n), val) if np.ndim(n) else val
        bound = abs(val)
    elif fam == "linear":
        a, b = float(p.get("a", 1.0)), float(p.get("b", 1.0))

        def base(n):
            return a + b * n
        bound = abs(a) if b == 0 else None
    elif fam == "geometric":
        a, b, r = float(p.get("a", 0.0)), float(p.get("b", 1.0)), float(p["r"])

        def base(n):
            with np.errstate(over="ignore"):
                return a + b * np.power(r, n)
        bound = (abs(a) + abs(b)) if 0 <= r <= 1 else None
    elif fam == "power":
        a, q = float(p.get("a", 1.0)), float(p["p"])

        def base(n):
            return a * np.power(n + 1.0, q)
        bound = abs(a) if q <= 0 else None
    elif fam == "alternating":
        a, b = float(p.get("a", 1.0)), float(p.get("b", 1.0))

        def base(n):
            return np.where(np.mod(n, 2) == 0, 1.0, -1.0) * (a + b * n)
        bound = abs(a) if b == 0 else None
    else:
        raise ModelError(f"unknown drift expression family {fam!r}")

    rate = float((time_factor or {}).get("rate", 0.0))

    def value(x, v=0.0):
        n = _state_array(x)
        out = base(n)
        if rate:
            out = out * math.exp(rate * v)
        return out

    deriv = None
    if rate:
        def deriv(x, v=0.0):
            return rate * value(x, v)
        if bound is not None and rate > 0:
            bound = None

    label = {"expr_family": fam, "params": p, "constant": constant, "kind": kind}
    if rate:
        label["time_factor"] = {"rate": rate}
    return DriftFunction(value, float(constant), kind, deriv, bool(rate), bound, label)


@dataclass(frozen=True)
class SetSequence:
    """A nondecreasing ladder S_0 subset S_1 subset ... of states, optionally
    paired with time windows [0, window(n)] for the nonhomogeneous case."""

    member: Callable[[int, object], bool]
    monotone: bool = True
    window: Callable[[int], float] | None = None
    label: dict = field(default_factory=dict, compare=False)

    def contains(self, n: int, xs) -> np.ndarray:
        return np.array([bool(self.member(n, x)) for x in np.asarray(xs).tolist()], dtype=bool)

    def time_window(self, n: int) -> float:
        return math.inf if self.window is None else float(self.window(n))

    def describe(self) -> dict:
        return dict(self.label) or {"family": "custom"}


def prefix_sets(offset: int = 0, time_step: float | None = None) -> SetSequence:
    """S_n = {0, ..., n + offset}; with ``time_step`` the window is [0, (n+1) h]."""
    def member(n, x):
        return not isinstance(x, Cemetery) and 0 <= int(x) <= n + offset
    window = None
    label = {"family": "prefix", "params": {"offset": offset}}
    if time_step is not None:
        h = float(time_step)

        def window(n):
            return (n + 1) * h
        label["params"]["time_step"] = h
    return SetSequence(member, True, window, label)


def check_monotone_sets(sets: SetSequence, states: Iterable, n_max: int) -> tuple[bool, tuple | None]:
    """Verify member(n, x) => member(n + 1, x) on a finite view."""
    states = list(states)
    for n in range(n_max):
        a = sets.contains(n, states)
        b = sets.contains(n + 1, states)
        bad = np.nonzero(a & ~b)[0]
        if bad.size:
            return False, (n, states[int(bad[0])])
        if sets.window is not None and sets.time_window(n + 1) < sets.time_window(n):
            return False, (n, None)
    return True, None


# --------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationRow:
    state: object
    time: float
    total_rate: float
    offdiag_sum: float
    residual: float
    tail_bound: float
    rate_bound: float
    ok: bool


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    rows: tuple
    failure: ValidationRow | None
    max_residual: float

    def as_dict(self) -> dict:
        fail = None
        if self.failure is not None:
            f = self.failure
            fail = {"state": repr(f.state), "time": f.time, "residual": f.residual,
                    "total_rate": f.total_rate, "rate_bound": f.rate_bound}
        return {"passed": self.passed, "checked": len(self.rows),
                "max_residual": self.max_residual, "first_failure": fail}


def validate_q_function(model: JumpModel, truncation: int, time_samples: Sequence[float]) -> ValidationReport:
    """Conservativeness, stability and sign checks on a finite view."""
    if truncation < 1:
        raise ModelError("truncation must be >= 1")
    model.space.require_countable("validate_q_function")
    rows = []
    failure = None
    worst = 0.0
    for x in model.space.states(truncation):
        bound = model.rate_bound(x)
        for t in time_samples:
            t = float(t)
            total = model.total_rate(x, t)
            targets = model.jump_targets(x, t, truncation)
            rates = [r for _, r in targets]
            off = math.fsum(rates)
            tail = model.tail_mass(x, t, truncation)
            resid = abs(off - total)
            finite = math.isfinite(total) and all(math.isfinite(r) and r >= 0 for r in rates) and total >= 0
            no_self = all(not _same_state(y, x) for y, _ in targets)
            ok = finite and no_self and resid <= tail + TAIL_SLACK + TAIL_SLACK * abs(total) \
                and total <= bound * (1 + 1e-12) + TAIL_SLACK
            row = ValidationRow(x, t, total, off, resid, tail, bound, ok)
            rows.append(row)
            if math.isfinite(resid):
                worst = max(worst, resid)
            if not ok and failure is None:
                failure = row
    return ValidationReport(failure is None, tuple(rows), failure, worst)


def _same_state(a, b) -> bool:
    if isinstance(a, Cemetery) or isinstance(b, Cemetery):
        return a is b
    return int(a) == int(b)


@dataclass(frozen=True)
class CDriftCheck:
    passed: bool
    max_residual: float
    witness: tuple | None


def drift_generator(model: JumpModel, f: DriftFunction, x, t: float, truncation=None) -> float:
    """Integral of f against q(dy|x,t): sum_y f(y) q({y}|x,t) - q_x(t) f(x)."""
    targets = model.jump_targets(x, t, truncation)
    fx = float(f.at([x], t)[0]) if not isinstance(x, Cemetery) else 0.0
    if not targets:
        return 0.0
    ys = [y for y, _ in targets]
    vals = f.at(ys, t) if not any(isinstance(y, Cemetery) for y in ys) else \
        np.array([0.0 if isinstance(y, Cemetery) else float(f.at([y], t)[0]) for y in ys])
    rates = np.array([r for _, r in targets])
    return float(np.dot(rates, vals) - model.total_rate(x, t) * fx)


def validate_c_drift(model: JumpModel, f: DriftFunction, truncation: int,
                     time_samples: Sequence[float]) -> CDriftCheck:
    """Check sum_y f(y) q({y}|x,s) <= c f(x) on the finite view."""
    if f.kind != "cdrift":
        raise ModelError("validate_c_drift expects a c-drift function")
    model.space.require_countable("validate_c_drift")
    worst = -math.inf
    witness = None
    for x in model.space.states(truncation):
        if isinstance(x, Cemetery):
            continue
        for t in time_samples:
            fx = float(f.at([x], float(t))[0])
            if not fx > 0:
                raise ModelError(f"c-drift function must be positive; f({x}) = {fx}")
            resid = drift_generator(model, f, x, float(t), truncation) - f.constant * fx
            if resid > worst:
                worst = resid
            if resid > 1e-12 * max(1.0, abs(fx) * f.constant) and witness is None:
                witness = (x, float(t), resid)
    return CDriftCheck(witness is None, float(worst), witness)


def require_positive(value: float, name: str) -> float:
    if not value > 0:
        raise ConfigurationError(f"{name} must be positive, got {value}")
    return float(value)
