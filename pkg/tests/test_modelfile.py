import json

import pytest

from purejump import ModelFileError
from purejump.modelfile import digest_bytes, load_model, parse_model, transformed_spec
from purejump.transform import TransformedModel


@pytest.mark.parametrize("name", ["yule.json", "birth2n.json", "flip_flop.json", "affine_yule.json", "zero.json"])
def test_shipped_models_load(models_dir, name):
    mf = load_model(models_dir / name)
    assert mf.digest == digest_bytes((models_dir / name).read_bytes())
    assert mf.model.total_rate(0, 0.0) >= 0


def test_yule_file_matches_builtin(models_dir):
    mf = load_model(models_dir / "yule.json")
    assert mf.model.total_rate(4, 0.0) == 5.0
    assert mf.drift(3) == 4.0 and mf.drift.constant == 1.0


def _err(text):
    with pytest.raises(ModelFileError) as info:
        parse_model(text)
    return info.value


def test_malformed_json_reports_line():
    e = _err('{\n  "name": "x",\n  "rates": {\n}')
    assert e.line is not None


def test_missing_rates():
    e = _err('{"name": "x"}')
    assert e.field == "rates"


def test_unknown_top_field_has_line():
    text = '{\n  "rates": {"family": "matrix", "params": {"rates": [[0, 1], [1, 0]]}},\n  "colour": 1\n}'
    e = _err(text)
    assert e.field == "colour" and e.line == 3


def test_unknown_family():
    e = _err('{"rates": {"family": "nope"}}')
    assert e.field == "family"


def test_bad_rate_law_parameter():
    text = json.dumps({"rates": {"family": "birth_death",
                                 "params": {"birth": {"law": "geometric", "a": 1}}}}, indent=1)
    e = _err(text)
    assert e.field == "birth" and "ratio" in str(e)


def test_negative_truncation():
    text = json.dumps({"space": {"truncation_default": -3},
                       "rates": {"family": "matrix", "params": {"rates": [[0, 1], [1, 0]]}}})
    assert _err(text).field == "truncation_default"


def test_bad_modulation():
    text = json.dumps({"rates": {"family": "matrix", "params": {"rates": [[0, 1], [1, 0]]}},
                       "modulation": {"family": "periodic", "params": {"b": 3}}})
    assert _err(text).field.startswith("modulation")


def test_missing_file():
    with pytest.raises(ModelFileError):
        load_model("/nonexistent/model.json")


def test_transformed_spec_round_trip(models_dir):
    mf = load_model(models_dir / "yule.json")
    spec = transformed_spec(mf.spec, mf.spec["drift"] | {"kind": "cdrift"}, 1.0)
    back = parse_model(json.dumps(spec))
    assert isinstance(back.model, TransformedModel)
    assert back.model.total_rate(3, 0.0) == pytest.approx(5.0)
