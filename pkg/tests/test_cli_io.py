import csv
import json
from fractions import Fraction

import numpy as np
import pytest

from kochlayer.cli import main
from kochlayer.geometry import build_domain
from kochlayer.harness import LIMSUP_COLUMNS
from kochlayer.io import MalformedInput, dumps, geometry_from_json, geometry_to_json, read_json, write_json

PLAN = """\
[plan]
p = 2
levels = 1..1
traces = const, dec-010
"""


def test_geom_writes_json_and_svg(tmp_path, capsys):
    svg = tmp_path / "svg"
    assert main(["geom", "--n", "2", "--eps", "0.05", "--out", str(tmp_path), "--svg", str(svg)]) == 0
    data = read_json(tmp_path / "geom_n2.json")
    assert data["level"] == 2
    assert (svg / "geom_n2.svg").read_text().lstrip().startswith("<")
    assert str(tmp_path / "geom_n2.json") in capsys.readouterr().out


def test_solve_unit_load(tmp_path):
    assert main(["solve", "--n", "2", "--eps", "0.05", "--p", "3", "--f", "one", "--out", str(tmp_path)]) == 0
    data = read_json(tmp_path / "solve_n2_p3_one.json")
    assert data["converged"]
    assert np.max(np.abs(np.array(data["values"]) - 1.0)) <= 1e-10
    assert "runtime_s" not in data["meta"]
    assert "runtime_s" in read_json(tmp_path / "solve_n2_p3_one.timing.json")


def test_solve_fractal(tmp_path):
    assert main(["solve", "--n", "1", "--p", "2", "--f", "poly", "--fractal", "--out", str(tmp_path)]) == 0
    assert read_json(tmp_path / "solve_fractal_n1_p2_poly.json")["meta"]["problem"] == "fractal"


def test_mosco_limsup_from_plan(tmp_path):
    plan = tmp_path / "plan.cfg"
    plan.write_text(PLAN, encoding="utf-8")
    out = tmp_path / "out"
    assert main(["mosco", "--suite", "limsup", "--plan", str(plan), "--out", str(out)]) == 0
    with open(out / "limsup.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LIMSUP_COLUMNS
    assert len(rows) == 3
    manifest = read_json(out / "manifest.json")
    assert set(manifest["files"]) == {"limsup.csv", "limsup.json"}


def test_malformed_plan_exits_1_with_field(tmp_path, capsys):
    plan = tmp_path / "bad.cfg"
    plan.write_text("[plan]\nlevels = 1..2\ntraces = const, nope\n", encoding="utf-8")
    assert main(["mosco", "--suite", "limsup", "--plan", str(plan), "--out", str(tmp_path)]) == 1
    assert "plan.traces" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [
    ["geom", "--eps", "abc"],
    ["geom", "--n", "2", "--eps", "0.5"],
    ["solve", "--p", "1.5"],
    ["solve", "--f", "nope"],
    ["frobnicate"],
    ["diag", "--threads", "0"],
])
def test_validation_errors_exit_1(argv, tmp_path):
    assert main([*argv, "--out", str(tmp_path)]) == 1


def test_numerical_failure_exits_2_with_diagnostic(tmp_path, capsys):
    code = main(["solve", "--n", "1", "--eps", "0.1", "--p", "3", "--tol", "1e-300", "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert str(tmp_path / "diagnostic.json") in err
    diag = read_json(tmp_path / "diagnostic.json")
    assert diag["error"] == "NonConvergence" and diag["trace"]


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("KOCHLAYER_OUT", str(tmp_path / "env"))
    assert main(["geom", "--n", "1"]) == 0
    assert (tmp_path / "env" / "geom_n1.json").exists()


def test_solve_threads_identical(tmp_path):
    for k in ("1", "3"):
        assert main(["solve", "--n", "1", "--p", "3", "--threads", k, "--out", str(tmp_path / k)]) == 0
    a, b = (read_json(tmp_path / k / "solve_n1_p3_poly.json") for k in ("1", "3"))
    assert a["config"].pop("threads") == 1 and b["config"].pop("threads") == 3
    assert a == b


def test_diag_and_mesh_commands(tmp_path):
    assert main(["diag", "--n", "1", "--out", str(tmp_path)]) == 0
    d = read_json(tmp_path / "diag_n1_p2.json")
    assert d["mesh_ok"] and d["supremum"] >= 1.0 - 1e-12
    assert main(["mesh", "--n", "1", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "mesh_n1.off").read_text().startswith("OFF")


def test_help_exits_0(capsys):
    assert main(["--help"]) == 0
    assert "geom" in capsys.readouterr().out


def test_geometry_roundtrip(tmp_path):
    geom = build_domain(2, Fraction(1, 20))
    path = write_json(geometry_to_json(geom), tmp_path / "g.json")
    back = geometry_from_json(read_json(path))
    assert back.to_json() == geom.to_json()
    assert [c.exact_edge() for c in back.collars] == [c.exact_edge() for c in geom.collars]


def test_geometry_json_tampering_detected():
    data = geometry_to_json(build_domain(1, Fraction(1, 10)))
    data = json.loads(json.dumps(data))
    data["level"] = 2
    with pytest.raises(MalformedInput):
        geometry_from_json(data)
    with pytest.raises(MalformedInput):
        geometry_from_json({"eps": 1})


def test_malformed_json_reports_position(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{\n "a": 1,\n "b": ]\n}\n', encoding="utf-8")
    with pytest.raises(MalformedInput, match="line 3 column 7"):
        read_json(path)


def test_floats_roundtrip_exactly():
    vals = [0.1, 1 / 3, np.float64(2.0) ** -1074, 1e300, -0.0]
    assert json.loads(dumps(vals)) == [float(v) for v in vals]
    with pytest.raises(ValueError):
        dumps([float("nan")])
