"""Declarative JSON model files.

Layout (every section but ``rates`` is optional)::

    {
      "name": "yule",
      "space": {"kind": "countable", "truncation_default": 50, "size": null},
      "rates": {"family": "birth_death",
                "params": {"birth": {"law": "linear", "a": 1, "b": 1},
                           "death": {"law": "zero"}}},
      "modulation": {"family": "affine", "params": {"b": 1.0}},
      "drift": {"expr_family": "linear", "params": {"a": 1, "b": 1},
                "constant": 1.0, "kind": "condition"},
      "sets": {"family": "prefix", "params": {"offset": 0}}
    }

Rate families: ``birth_death`` (rate laws ``zero``, ``constant``,
``linear``, ``geometric``, ``power``), ``matrix`` (square off-diagonal rate
matrix) and ``f_transform`` (``{"base": <rates section>, "f": <drift
section>, "c": c}``, written by the ``transform`` command).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import ModelError, ModelFileError
from .model import (DriftFunction, JumpModel, MatrixModel, Modulation, RateLaw, SetSequence,
                    build_birth_death, drift_function, prefix_sets)

TOP_FIELDS = {"name", "space", "rates", "modulation", "drift", "sets", "description"}


@dataclass(frozen=True)
class ModelFile:
    model: JumpModel
    drift: DriftFunction | None
    sets: SetSequence
    digest: str
    spec: dict
    path: str | None = None


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for k, line in enumerate(text.splitlines(), start=1):
        if needle in line:
            return k
    return None


class _Ctx:
    def __init__(self, text: str):
        self.text = text

    def fail(self, field: str, message: str):
        raise ModelFileError(f"{field}: {message}", field, _line_of(self.text, field.split(".")[-1]))


def _section(ctx: _Ctx, spec: dict, key: str, required: bool = False) -> dict:
    val = spec.get(key)
    if val is None:
        if required:
            ctx.fail(key, "missing required section")
        return {}
    if not isinstance(val, dict):
        ctx.fail(key, "must be an object")
    return val


def _number(ctx: _Ctx, field: str, value, positive: bool = False, integer: bool = False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        ctx.fail(field, f"expected a number, got {value!r}")
    if not math.isfinite(value):
        ctx.fail(field, "must be finite")
    if integer and int(value) != value:
        ctx.fail(field, "must be an integer")
    if positive and value <= 0:
        ctx.fail(field, "must be positive")
    return int(value) if integer else float(value)


def _modulation(ctx: _Ctx, sec: dict) -> Modulation | None:
    if not sec:
        return None
    fam = sec.get("family", "constant")
    params = sec.get("params", {}) or {}
    if not isinstance(params, dict):
        ctx.fail("modulation.params", "must be an object")
    try:
        return Modulation.make(fam, **params)
    except (ModelError, TypeError, ValueError) as exc:
        ctx.fail("modulation.family" if "family" in str(exc) else "modulation.params", str(exc))


def _rate_law(ctx: _Ctx, field: str, spec):
    if spec is None:
        return None
    try:
        return RateLaw.from_dict(spec)
    except KeyError as exc:
        ctx.fail(field, f"missing parameter {exc.args[0]!r}")
    except (ModelError, TypeError, ValueError, AttributeError) as exc:
        ctx.fail(field, str(exc))


def _rates(ctx: _Ctx, rates: dict, space: dict, modulation, name: str) -> JumpModel:
    fam = rates.get("family")
    params = rates.get("params", {}) or {}
    if not isinstance(params, dict):
        ctx.fail("rates.params", "must be an object")
    trunc = space.get("truncation_default", 50)
    trunc = _number(ctx, "truncation_default", trunc, positive=True, integer=True)
    size = space.get("size")
    if size is not None:
        size = _number(ctx, "size", size, positive=True, integer=True)
    kind = space.get("kind", "countable")
    if kind != "countable":
        ctx.fail("kind", "model files describe countable spaces only; sampler spaces need the Python API")
    try:
        if fam == "birth_death":
            if "birth" not in params:
                ctx.fail("birth", "birth_death rates need a birth law")
            birth = _rate_law(ctx, "birth", params.get("birth"))
            death = _rate_law(ctx, "death", params.get("death"))
            return build_birth_death(birth, death, modulation, size=size,
                                     truncation_default=trunc, name=name or "birth-death")
        if fam == "matrix":
            mat = params.get("rates")
            if not isinstance(mat, list) or not mat or not all(isinstance(r, list) for r in mat):
                ctx.fail("rates.params", "matrix family needs params.rates as a list of rows")
            return MatrixModel(mat, modulation or Modulation(), name=name or "matrix",
                               truncation_default=trunc)
        if fam == "f_transform":
            from .transform import f_transform
            base_sec = params.get("base")
            if not isinstance(base_sec, dict):
                ctx.fail("base", "f_transform needs a base rates section")
            base = _rates(ctx, base_sec, space, modulation, params.get("base_name", ""))
            f = _drift(ctx, params.get("f"), "f")
            if f is None:
                ctx.fail("f", "f_transform needs f")
            c = _number(ctx, "c", params.get("c", f.constant))
            return f_transform(base, f, c, trunc)
    except ModelFileError:
        raise
    except (ModelError, TypeError, ValueError) as exc:
        ctx.fail("rates.params", str(exc))
    ctx.fail("family", f"unknown rate family {fam!r} (birth_death, matrix, f_transform)")


def _drift(ctx: _Ctx, sec, field: str = "drift") -> DriftFunction | None:
    if not sec:
        return None
    if not isinstance(sec, dict):
        ctx.fail(field, "must be an object")
    fam = sec.get("expr_family")
    if fam is None:
        ctx.fail("expr_family", f"{field} needs expr_family")
    params = sec.get("params", {}) or {}
    constant = _number(ctx, "constant", sec.get("constant", 0.0))
    kind = sec.get("kind", "condition")
    if kind in ("c-drift", "c_drift", "CDrift"):
        kind = "cdrift"
    if kind in ("ConditionV", "V"):
        kind = "condition"
    try:
        return drift_function(fam, params, constant, kind, sec.get("time_factor"))
    except KeyError as exc:
        ctx.fail("params", f"{field} missing parameter {exc.args[0]!r}")
    except (ModelError, TypeError, ValueError) as exc:
        ctx.fail("expr_family" if "family" in str(exc) else "params", str(exc))


def _sets(ctx: _Ctx, sec: dict) -> SetSequence:
    if not sec:
        return prefix_sets()
    fam = sec.get("family", "prefix")
    params = sec.get("params", {}) or {}
    if fam != "prefix":
        ctx.fail("sets.family", f"unknown set family {fam!r} (prefix)")
    offset = _number(ctx, "offset", params.get("offset", 0), integer=True)
    step = params.get("time_step")
    if step is not None:
        step = _number(ctx, "time_step", step, positive=True)
    return prefix_sets(offset, step)


def parse_model(text: str, path: str | None = None) -> ModelFile:
    """Parse a model file body; errors carry the field and line number."""
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"malformed JSON: {exc.msg}", None, exc.lineno) from exc
    ctx = _Ctx(text)
    if not isinstance(spec, dict):
        raise ModelFileError("model file must hold a JSON object", None, 1)
    unknown = sorted(set(spec) - TOP_FIELDS)
    if unknown:
        ctx.fail(unknown[0], "unknown top-level field")
    space = _section(ctx, spec, "space")
    rates = _section(ctx, spec, "rates", required=True)
    modulation = _modulation(ctx, _section(ctx, spec, "modulation"))
    name = spec.get("name", "")
    model = _rates(ctx, rates, space, modulation, name)
    drift = _drift(ctx, spec.get("drift"))
    sets = _sets(ctx, _section(ctx, spec, "sets"))
    return ModelFile(model, drift, sets, digest_bytes(text.encode("utf-8")), spec, path)


def load_model(path) -> ModelFile:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise ModelFileError(f"cannot read model file {str(p)!r}: {exc.strerror}", "model", None) from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ModelFileError("model file is not UTF-8 text", None, None) from exc
    mf = parse_model(text, str(p))
    return ModelFile(mf.model, mf.drift, mf.sets, digest_bytes(data), mf.spec, str(p))


def transformed_spec(spec: dict, f_section: dict, c: float) -> dict:
    """Model file for q^f built from a base model file section."""
    out = {k: v for k, v in spec.items() if k not in ("rates", "drift", "name")}
    out["name"] = f"{spec.get('name', 'model')}|f-transform"
    out["rates"] = {"family": "f_transform",
                    "params": {"base": spec["rates"], "base_name": spec.get("name", ""),
                               "f": f_section, "c": c}}
    return out
