import io
import json
import subprocess
import sys
from contextlib import redirect_stdout
from pathlib import Path

import jsonschema
import pytest

from conftest import MODELS, ROOT
from purejump.cli import run

SCHEMA = json.loads((ROOT / "docs" / "report.schema.json").read_text())
YULE = str(MODELS / "yule.json")
GEO = str(MODELS / "birth2n.json")
FLIP = str(MODELS / "flip_flop.json")
AFFINE = str(MODELS / "affine_yule.json")


def cli(*argv):
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = run([str(a) for a in argv])
    return code, buf.getvalue()


def report(*argv):
    code, out = cli(*argv)
    rep = json.loads(out)
    jsonschema.validate(rep, SCHEMA)
    assert rep["exit_code"] == code
    return code, rep


@pytest.mark.parametrize("argv,code", [
    (["validate", "--model", YULE], 0),
    (["transition", "--model", FLIP, "--horizon", "1"], 0),
    (["simulate", "--model", YULE, "--horizon", "1", "--paths", "50"], 0),
    (["explosion-prob", "--model", GEO, "--horizon", "2", "--paths", "2000", "--jump-cap", "300"], 2),
    (["explosion-prob", "--model", YULE, "--horizon", "1", "--paths", "200"], 0),
    (["resolvent", "--model", GEO, "--alpha", "1"], 2),
    (["embedded-solve", "--model", GEO, "--alpha", "1"], 2),
    (["embedded-solve", "--model", YULE, "--alpha", "1"], 0),
    (["drift-check", "--model", YULE, "--condition", "5", "--alpha", "1"], 0),
    (["drift-check", "--model", GEO, "--condition", "5", "--alpha", "1"], 2),
    (["drift-check", "--model", AFFINE, "--condition", "6", "--horizons", "1,2", "--alpha-of-T", "T",
      "--truncation", "15", "--audit"], 0),
    (["transform", "--model", YULE, "--truncation", "20"], 0),
])
def test_exit_codes_and_schema(argv, code):
    got, rep = report(*argv, "--no-timing")
    assert got == code, rep
    assert rep["command"] == argv[0] and rep["wall_time"] is None


def test_refutation_witness_in_report():
    _, rep = report("drift-check", "--model", GEO, "--condition", "5", "--alpha", "1")
    cert = rep["results"]["certificate"]
    assert cert["verdict"] == "refuted" and cert["witness"]["state"] == 2


def test_missing_model_is_error():
    code, out = cli("validate", "--model", "/nonexistent.json")
    assert code == 1


def test_bad_model_file_is_error(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"rates": {"family": "nope"}}')
    code, out = cli("validate", "--model", p)
    assert code == 1


def test_digest_is_file_hash():
    import hashlib
    _, rep = report("validate", "--model", YULE)
    assert rep["model_digest"] == hashlib.sha256(Path(YULE).read_bytes()).hexdigest()


def test_byte_identical_across_threads():
    argv = ["explosion-prob", "--model", GEO, "--horizon", "2", "--paths", "3000", "--jump-cap", "300",
            "--seed", "5", "--no-timing"]
    outs = {cli(*argv, "--threads", k)[1] for k in (1, 2, 4)}
    assert len(outs) == 1


def test_csv_output():
    code, out = cli("transition", "--model", FLIP, "--horizon", "1", "--format", "csv", "--no-timing")
    assert code == 0 and "," in out.splitlines()[0]


def test_plot_written(tmp_path):
    png = tmp_path / "curve.png"
    code, _ = cli("explosion-prob", "--model", GEO, "--horizon", "2", "--paths", "500", "--jump-cap", "200",
                  "--plot", png, "--no-timing")
    assert code == 2 and png.stat().st_size > 1000


def test_out_file(tmp_path):
    out = tmp_path / "r.json"
    code, stdout = cli("validate", "--model", YULE, "--out", out)
    assert code == 0 and json.loads(out.read_text())["command"] == "validate"


def test_emitted_transform_validates(tmp_path):
    emitted = tmp_path / "yf.json"
    code, _ = cli("transform", "--model", YULE, "--truncation", "20", "--emit", emitted)
    assert code == 0
    assert cli("validate", "--model", emitted, "--truncation", "20")[0] == 0


def test_dynkin_geometric_exit_code():
    f = json.dumps({"expr_family": "geometric", "params": {"a": 2, "b": -1, "r": 0.5}, "constant": 0.5,
                    "kind": "cdrift"})
    code, rep = report("dynkin-check", "--model", GEO, "--f", f, "--c", "0.5", "--horizon", "2",
                       "--truncation", "40")
    assert code == 2 and rep["results"]["equivalence"] is True


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-c", "from purejump.cli import main; main()",
                           "validate", "--model", YULE, "--no-timing"], capture_output=True, text=True)
    assert proc.returncode == 0 and json.loads(proc.stdout)["exit_code"] == 0
