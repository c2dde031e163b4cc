"""Command-line entry point: ``purejump <command> --model FILE [options]``.

Every command prints a JSON run report (or a two-column CSV curve with
``--format csv``).  Exit codes: 0 certified / holds / nonexplosive,
1 error or inconclusive, 2 refuted / fails / explosive.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from typing import Callable

import numpy as np

from . import __version__
from .drift import (check_condition2, check_condition5, check_condition6, check_condition7,
                    implication_audit)
from .embedded import zero_exit_verdict
from .errors import ModelFileError, PureJumpError
from .feller import feller_series, forward_ode, resolvent, transition_curve
from .model import DriftFunction, validate_q_function
from .modelfile import ModelFile, _Ctx, _drift, load_model, transformed_spec
from .simulate import (DEFAULT_JUMP_CAP, default_threads, explosion_probability, mc_resolvent,
                       sample_paths)
from .transform import dynkin_check, dynkin_extended_check, f_transform

log = logging.getLogger("purejump")

EXIT_OK, EXIT_ERROR, EXIT_REFUTED = 0, 1, 2
CURVE_POINTS = 101


class Outcome:
    """Command payload plus everything the report and the CSV/plot writers need."""

    def __init__(self, results: dict, code: int, seeds: dict | None = None, budgets: dict | None = None,
                 curve: tuple | None = None, plot: Callable[[str], None] | None = None):
        self.results = results
        self.code = code
        self.seeds = seeds or {}
        self.budgets = budgets or {}
        self.curve = curve
        self.plot = plot


# --------------------------------------------------------------------------
# helpers


def _clean(obj):
    """JSON-safe copy: non-finite floats become strings, numpy scalars plain numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if obj is None or isinstance(obj, str):
        return obj
    return repr(obj)


def _state(text: str):
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"states are nonnegative integers, got {text!r}")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _json_section(text: str | None, label: str) -> dict | None:
    if text is None:
        return None
    try:
        val = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{label} is not valid JSON: {exc.msg}", label, None) from exc
    if not isinstance(val, dict):
        raise ModelFileError(f"{label} must be a JSON object", label, None)
    return val


def _drift_from(args, mf: ModelFile, option: str, kind: str) -> tuple[DriftFunction, dict]:
    sec = _json_section(getattr(args, option), f"--{option}")
    if sec is None:
        sec = mf.spec.get("drift")
    if not sec:
        raise ModelFileError(f"no drift function: pass --{option} or add a drift section", "drift", None)
    sec = dict(sec)
    sec.setdefault("kind", kind)
    ctx = _Ctx(json.dumps(sec, indent=1))
    return _drift(ctx, sec, option), sec


def _alpha_rule(args):
    rule = args.alpha_of_T
    if rule is None:
        return None if args.alpha is None else (lambda T, a=float(args.alpha): a)
    if rule == "search":
        return None
    if rule == "T":
        return lambda T: float(T)
    try:
        a = float(rule)
    except ValueError:
        raise PureJumpError(f"--alpha-of-T must be 'search', 'T' or a number, got {rule!r}")
    return lambda T: a


def _grid(t0: float, t1: float, points: int = CURVE_POINTS) -> np.ndarray:
    return np.linspace(t0, t1, points)


# --------------------------------------------------------------------------
# commands


def cmd_validate(args, mf: ModelFile) -> Outcome:
    times = args.times or [0.0, 1.0, 5.0]
    n = mf.model.space.base_count(args.truncation)
    rep = validate_q_function(mf.model, n, times)
    results = {"validation": rep.as_dict(), "truncation": n, "time_samples": times}

    def plot(path):
        from .plotting import line_plot
        rows = [r for r in rep.rows if r.time == times[0]]
        line_plot(path, {f"t={times[0]:g}": ([int(r.state) for r in rows], [r.residual for r in rows])},
                  "state", "conservativeness residual", "Q-function validation")
    return Outcome(results, EXIT_OK if rep.passed else EXIT_ERROR,
                   budgets={"max_residual": rep.max_residual}, plot=plot)


def cmd_transition(args, mf: ModelFile) -> Outcome:
    model = mf.model
    t = args.horizon if args.horizon is not None else 1.0
    n = model.space.base_count(args.truncation)
    target = args.target
    out = {"s": args.s, "x": args.x0, "t": t, "truncation": n,
           "target_set": target if target is not None else "truncation"}
    budgets = {}
    if args.method in ("ode", "both"):
        est = forward_ode(model, args.s, args.x0, t, n)
        out["forward_ode"] = est.as_dict()
        out["forward_ode"]["target_mass"] = est.mass(target)
        budgets["forward_ode"] = est.error_budget
    if args.method in ("series", "both"):
        est = feller_series(model, args.s, args.x0, t, n)
        out["feller_series"] = est.as_dict()
        out["feller_series"]["target_mass"] = est.mass(target)
        budgets["feller_series"] = est.error_budget
    if args.method == "both":
        out["method_agreement"] = abs(out["forward_ode"]["target_mass"] - out["feller_series"]["target_mass"])
    ts, ms = transition_curve(model, args.s, args.x0, t, _grid(args.s, t), n, target)
    label = "P(s,x,t,target)" if target is not None else "P(s,x,t,truncation)"

    def plot(path):
        from .plotting import line_plot
        line_plot(path, {label: (ts, ms)}, "t", "mass", f"{model.name}: transition mass from x={args.x0}")
    return Outcome(out, EXIT_OK, budgets=budgets, curve=(("time", "mass"), ts, ms), plot=plot)


def cmd_simulate(args, mf: ModelFile) -> Outcome:
    horizon = args.horizon if args.horizon is not None else 1.0
    paths = args.paths if args.paths is not None else 10
    cap = args.jump_cap
    trajs = sample_paths(mf.model, args.x0, horizon, paths, args.seed, cap)
    rows = [{"path": i, "jumps": tr.n_jumps, "end_time": tr.end_time, "terminal": tr.terminal,
             "explosion_flag": tr.explosion_flag, "final_state": tr.states[-1],
             "trajectory": [[float(a), b] for a, b in tr.as_rows()] if args.full else None}
            for i, tr in enumerate(trajs)]
    flagged = sorted(tr.end_time for tr in trajs if tr.explosion_flag)
    grid = _grid(0.0, horizon)
    cdf = np.searchsorted(np.array(flagged), grid, side="right") / max(1, paths)
    results = {"paths": rows, "horizon": horizon, "jump_cap": cap,
               "explosion_flags": sum(tr.explosion_flag for tr in trajs)}

    def plot(path):
        from .plotting import line_plot
        series = {f"path {i}": ([float(a) for a in tr.times] + [tr.end_time],
                                [b for b in tr.states] + [tr.states[-1]])
                  for i, tr in enumerate(trajs[:10])}
        line_plot(path, series, "t", "state", f"{mf.model.name}: sample paths", step=True)
    return Outcome(results, EXIT_OK, seeds={"base_seed": args.seed, "stream": "SeedSequence([base_seed, path])"},
                   curve=(("time", "explosion_cdf"), grid, cdf), plot=plot)


def cmd_explosion(args, mf: ModelFile) -> Outcome:
    horizon = args.horizon if args.horizon is not None else 2.0
    paths = args.paths if args.paths is not None else 10_000
    est = explosion_probability(mf.model, args.x0, horizon, paths, args.jump_cap, args.seed, args.threads)
    lower = est.estimate - 3 * est.stderr
    if not est.cap_sensitivity_ok:
        verdict, code = "inconclusive", EXIT_ERROR
    elif est.estimate > 0 and lower > 0:
        verdict, code = "explosive", EXIT_REFUTED
    else:
        verdict, code = "no-explosion-detected", EXIT_OK
    results = est.as_dict()
    seeds = results.pop("seeds")
    results["verdict"] = verdict
    grid = _grid(0.0, horizon)
    cdf = est.cdf(grid)

    def plot(path):
        from .plotting import line_plot
        line_plot(path, {"P(t_inf <= t)": (grid, cdf)}, "t", "probability",
                  f"{mf.model.name}: explosion-time distribution ({paths} paths)")
    return Outcome(results, code, seeds=seeds, budgets={"stderr": est.stderr},
                   curve=(("time", "explosion_cdf"), grid, cdf), plot=plot)


def cmd_resolvent(args, mf: ModelFile) -> Outcome:
    alpha = args.alpha if args.alpha is not None else 1.0
    out, budgets, seeds = {"alpha": alpha, "x": args.x0}, {}, {}
    code = EXIT_OK
    q = None
    if args.method in ("quadrature", "both"):
        q = resolvent(mf.model, alpha, 0.0, args.x0, args.truncation, args.horizon)
        out["quadrature"] = q.as_dict()
        budgets["quadrature"] = q.error_budget
        if not q.stabilized:
            code = EXIT_ERROR
            out["quadrature"]["verdict"] = "inconclusive"
        elif 1.0 - q.value > q.error_budget:
            code = EXIT_REFUTED
            out["quadrature"]["verdict"] = "explosive"
        else:
            out["quadrature"]["verdict"] = "nonexplosive"
    if args.method in ("mc", "both"):
        paths = args.paths if args.paths is not None else 10_000
        m = mc_resolvent(mf.model, alpha, args.x0, paths, args.seed, args.jump_cap, args.horizon, args.threads)
        d = m.as_dict()
        seeds = d.pop("seeds")
        out["monte_carlo"] = d
        budgets["monte_carlo"] = 3 * m.stderr + m.unresolved_bias_bound
        if args.method == "mc":
            code = EXIT_REFUTED if 1.0 - m.estimate > budgets["monte_carlo"] else EXIT_OK
    if args.method == "both":
        diff = abs(out["quadrature"]["value"] - out["monte_carlo"]["estimate"])
        out["agreement"] = {"difference": diff, "within_budget": diff <= budgets["quadrature"] + budgets["monte_carlo"]}

    def plot(path):
        from .plotting import line_plot
        if q is None:
            raise PureJumpError("--plot for resolvent needs the quadrature method")
        line_plot(path, {"resolvent": (list(q.schedule), list(q.sequence))}, "truncation",
                  "alpha * int e^{-alpha t} P(t) dt", f"{mf.model.name}: resolvent along the truncation schedule")
    return Outcome(out, code, seeds=seeds, budgets=budgets, plot=plot)


def cmd_embedded(args, mf: ModelFile) -> Outcome:
    alpha = args.alpha if args.alpha is not None else 1.0
    grid = None
    if args.time_grid is not None:
        grid = args.time_grid
    v = zero_exit_verdict(mf.model, alpha, args.truncation, grid, args.window)
    out = v.as_dict()
    out["alpha"] = alpha
    states = list(range(min(v.U.chain.n_states, args.show)))
    u0 = v.U.window(states)[0]
    out["U_at_time_0"] = {str(x): float(u) for x, u in zip(states, u0)}
    out["W_at_time_0"] = {str(x): float(1 - u) for x, u in zip(states, u0)}
    code = {"nonexplosive": EXIT_OK, "explosive": EXIT_REFUTED}.get(v.verdict, EXIT_ERROR)

    def plot(path):
        from .plotting import line_plot
        line_plot(path, {"U(0, x)": (states, u0)}, "state x", "U = 1 - W",
                  f"{mf.model.name}: maximal zero-exit solution (alpha={alpha:g})")
    return Outcome(out, code, budgets={"fixed_point_residual": v.fixed_point_residual},
                   curve=(("state", "U"), np.array(states), u0), plot=plot)


def cmd_drift(args, mf: ModelFile) -> Outcome:
    V, sec = _drift_from(args, mf, "drift", "condition")
    cond = args.condition
    sets = mf.sets
    model = mf.model
    times = args.times or [0.0]
    horizons = args.horizons or [1.0, 2.0]
    audit = None
    if cond == "5":
        cert = check_condition5(model, V, sets, args.alpha, args.truncation, times)
    elif cond == "2":
        cert = check_condition2(model, V, sets, args.alpha, args.truncation, times)
    elif cond == "7":
        cert = check_condition7(model, V, sets, _alpha_rule(args), horizons, args.truncation)
    else:
        rule = _alpha_rule(args)
        cert = check_condition6(model, V, rule, horizons, args.truncation, sets)
        if args.audit:
            audit = implication_audit(model, V, rule, horizons, args.truncation, sets)
    out = {"certificate": cert.as_dict(), "drift": sec}
    code = EXIT_OK if cert.certified else EXIT_REFUTED
    if audit is not None:
        out["implication_audit"] = audit.as_dict()
        if not audit.skipped and not audit.consistent:
            code = EXIT_ERROR
    states = list(range(model.space.base_count(args.truncation)))

    def plot(path):
        from .plotting import line_plot
        line_plot(path, {"V(0, x)": (states, V.at(states, 0.0))}, "state x", "V",
                  f"{model.name}: condition {cond} test function ({cert.verdict})")
    return Outcome(out, code, budgets={"margin_tolerance": 1e-9}, plot=plot)


def cmd_transform(args, mf: ModelFile) -> Outcome:
    f, sec = _drift_from(args, mf, "f", "cdrift")
    c = args.c if args.c is not None else f.constant
    sec = dict(sec, kind="cdrift", constant=c)
    tm = f_transform(mf.model, f, c, args.truncation, args.times or [0.0])
    spec = transformed_spec(mf.spec, sec, c)
    if args.emit:
        with open(args.emit, "w", encoding="utf-8") as fh:
            json.dump(spec, fh, indent=2, sort_keys=True)
            fh.write("\n")
    n = tm.space.base_count(args.truncation)
    delta = [tm.delta_rate(x, 0.0) for x in range(n)]
    out = {"model_file": spec, "c": c, "delta_rate_at_time_0": {str(x): d for x, d in enumerate(delta)},
           "total_rate_at_time_0": {str(x): tm.total_rate(x, 0.0) for x in range(n)},
           "emitted": args.emit}
    vrep = validate_q_function(tm, n, args.times or [0.0])
    out["validation"] = vrep.as_dict()

    def plot(path):
        from .plotting import line_plot
        line_plot(path, {"rate to DELTA": (list(range(n)), delta)}, "state x", "rate",
                  f"{mf.model.name}: f-transform killing rate (c={c:g})")
    return Outcome(out, EXIT_OK if vrep.passed else EXIT_ERROR,
                   curve=(("state", "delta_rate"), np.arange(n), np.array(delta)), plot=plot)


def cmd_dynkin(args, mf: ModelFile) -> Outcome:
    f, sec = _drift_from(args, mf, "f", "cdrift")
    c = args.c if args.c is not None else f.constant
    t = args.horizon if args.horizon is not None else 1.0
    g_sec = _json_section(args.g, "--g")
    if g_sec is not None:
        g = _drift(_Ctx(json.dumps(g_sec, indent=1)), g_sec, "g")
        rep = dynkin_extended_check(mf.model, f, c, g, args.x0, t, args.truncation)
    else:
        rep = dynkin_check(mf.model, f, c, args.x0, t, args.truncation)
    out = rep.as_dict()
    out.update({"x": args.x0, "t": t, "c": c, "f": sec})
    if g_sec is not None:
        out["g"] = g_sec
    if rep.status == "inconclusive" or rep.equivalence is None:
        code = EXIT_ERROR
    elif rep.equivalence is False:
        code = EXIT_ERROR
        out["error"] = "Dynkin verdict and transformed-model verdict disagree"
    else:
        code = EXIT_OK if rep.holds else EXIT_REFUTED

    def plot(path):
        from .plotting import bar_plot
        bar_plot(path, ["E f(X_t) - f(x)", "int E Lf(X_u) du"], [rep.lhs, rep.rhs],
                 [rep.lhs_budget, rep.rhs_budget], "value",
                 f"{mf.model.name}: Dynkin check ({rep.status}, q^f {rep.transformed.verdict})")
    return Outcome(out, code, budgets={"lhs": rep.lhs_budget, "rhs": rep.rhs_budget, "combined": rep.budget},
                   plot=plot)


COMMANDS = {
    "validate": (cmd_validate, "check the Q-function contract on a finite view"),
    "transition": (cmd_transition, "P(s, x, t, .) by the forward equation and/or the series of iterates"),
    "simulate": (cmd_simulate, "sample jump paths"),
    "explosion-prob": (cmd_explosion, "Monte Carlo estimate of P(t_inf <= T)"),
    "resolvent": (cmd_resolvent, "alpha * int e^{-alpha t} P(0, x, t, S) dt"),
    "embedded-solve": (cmd_embedded, "zero-exit verdict from the embedded chain"),
    "drift-check": (cmd_drift, "certify or refute a drift condition"),
    "transform": (cmd_transform, "build the f-transformed model file"),
    "dynkin-check": (cmd_dynkin, "Dynkin's formula against nonexplosion of the f-transform"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", required=True, help="model file (JSON)")
    common.add_argument("--truncation", type=int, default=None, help="enumerated states kept (default: model's)")
    common.add_argument("--alpha", type=float, default=None, help="discount rate alpha > 0")
    common.add_argument("--horizon", type=float, default=None, help="time horizon T")
    common.add_argument("--paths", type=int, default=None, help="Monte Carlo paths")
    common.add_argument("--seed", type=int, default=0, help="base seed (path i uses SeedSequence([seed, i]))")
    common.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: PUREJUMP_THREADS or 1); never changes results")
    common.add_argument("--out", default=None, help="write the report here instead of stdout")
    common.add_argument("--format", choices=("json", "csv"), default="json")
    common.add_argument("--plot", default=None, metavar="FILE", help="also render a figure (needs matplotlib)")
    common.add_argument("--no-timing", action="store_true", help="omit wall time so reports are byte-stable")
    common.add_argument("--x0", type=_state, default=0, help="starting state")
    common.add_argument("--times", type=_floats, default=None, help="comma-separated time samples")
    common.add_argument("--jump-cap", type=int, default=DEFAULT_JUMP_CAP, help="jumps before a path counts as exploded")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="purejump", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"purejump {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    ps = {name: sub.add_parser(name, parents=[common], help=h, description=h)
          for name, (_, h) in COMMANDS.items()}

    ps["transition"].add_argument("--s", type=float, default=0.0, help="start time")
    ps["transition"].add_argument("--method", choices=("ode", "series", "both"), default="both")
    ps["transition"].add_argument("--target", type=_ints, default=None, help="comma-separated target states")
    ps["simulate"].add_argument("--full", action="store_true", help="include every jump of every path")
    ps["resolvent"].add_argument("--method", choices=("quadrature", "mc", "both"), default="quadrature")
    ps["embedded-solve"].add_argument("--time-grid", type=_floats, default=None)
    ps["embedded-solve"].add_argument("--window", type=_ints, default=None, help="states whose sup U is tested")
    ps["embedded-solve"].add_argument("--show", type=int, default=20, help="states listed in the report")
    d = ps["drift-check"]
    d.add_argument("--condition", choices=("2", "5", "6", "7"), required=True)
    d.add_argument("--drift", default=None, help="drift section as JSON (default: the model file's)")
    d.add_argument("--horizons", type=_floats, default=None, help="horizons T for conditions 6 and 7")
    d.add_argument("--alpha-of-T", default=None, help="'search' (default), 'T' or a constant")
    d.add_argument("--audit", action="store_true", help="with condition 6: check conditions 2 and 7 follow")
    for name in ("transform", "dynkin-check"):
        ps[name].add_argument("--f", default=None, help="c-drift function as JSON (default: drift section)")
        ps[name].add_argument("--c", type=float, default=None, help="drift constant c (default: f's constant)")
    ps["transform"].add_argument("--emit", default=None, help="write the transformed model file here")
    ps["dynkin-check"].add_argument("--g", default=None, help="f-bounded function g as JSON")
    return parser


def _parameters(args) -> dict:
    skip = {"command", "model", "out", "format", "plot", "threads", "verbose", "no_timing", "emit"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _write(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def render_csv(outcome: Outcome) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if outcome.curve is not None:
        header, xs, ys = outcome.curve
        w.writerow(header)
        for a, b in zip(xs, ys):
            w.writerow([repr(float(a)), repr(float(b))])
    else:
        w.writerow(("key", "value"))
        for k, v in _flatten(_clean(outcome.results)):
            w.writerow((k, v))
    return buf.getvalue()


def _flatten(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _flatten(v, f"{prefix}.{k}" if prefix else k)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            yield from _flatten(v, f"{prefix}[{i}]")
    else:
        yield prefix, obj


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_ERROR
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="purejump: %(message)s", stream=sys.stderr)
    threads = args.threads if args.threads is not None else default_threads()
    args.threads = threads
    start = time.perf_counter()
    try:
        mf = load_model(args.model)
        outcome = COMMANDS[args.command][0](args, mf)
    except ModelFileError as exc:
        sys.stderr.write(f"purejump: model file error: {exc}\n")
        return EXIT_ERROR
    except (PureJumpError, ValueError, OverflowError) as exc:
        sys.stderr.write(f"purejump: {type(exc).__name__}: {exc}\n")
        return EXIT_ERROR
    wall = time.perf_counter() - start
    report = {"command": args.command, "model_digest": mf.digest, "parameters": _parameters(args),
              "results": outcome.results, "seeds": outcome.seeds, "budgets": outcome.budgets,
              "exit_code": outcome.code, "wall_time": None if args.no_timing else wall}
    if args.format == "json":
        text = json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False) + "\n"
    else:
        text = render_csv(outcome)
    _write(text, args.out)
    if args.plot:
        try:
            outcome.plot(args.plot)
        except PureJumpError as exc:
            sys.stderr.write(f"purejump: {exc}\n")
            return EXIT_ERROR
        log.info("figure written to %s", args.plot)
    log.info("%s finished in %.3fs with %d threads", args.command, wall, threads)
    return outcome.code


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
