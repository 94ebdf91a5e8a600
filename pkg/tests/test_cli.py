"""Command-line surface: exit codes, report round-trips, determinism."""

import json
import math

import numpy as np
import pytest

from bnbpep.cli import (
    EXIT_BAD_ARGS,
    EXIT_OK,
    dispatch,
    dumps_report,
    read_report,
    write_report,
)


def run(argv):
    return dispatch(argv)


def write_steps(tmp_path, name, basis, values):
    path = tmp_path / name
    path.write_text(json.dumps({"basis": basis, "N": len(values),
                                "values": values}))
    return str(path)


def test_bad_arguments_exit_code():
    assert run(["solve", "--problem", "nope", "--N", "1"]) == EXIT_BAD_ARGS
    assert run(["evaluate", "--problem", "sc-grad"]) == EXIT_BAD_ARGS
    assert run([]) == EXIT_BAD_ARGS


def test_evaluate_unit_step(tmp_path, capsys):
    steps = write_steps(tmp_path, "h.json", "h", [[1.0]])
    out = tmp_path / "r.json"
    code = run(["evaluate", "--problem", "gd-nomomentum", "--N", "1",
                "--stepsizes", steps, "--out", str(out)])
    assert code == EXIT_OK
    rep = read_report(str(out))
    assert rep["value"] == pytest.approx(1.0 / 6.0, abs=1e-6)
    assert rep["spec"]["problem"] == "gd-nomomentum"


def test_certify_potential(tmp_path):
    out = tmp_path / "c.json"
    code = run(["certify-potential", "--N", "1", "--h", "0.01",
                "--kappa", "0.1", "--out", str(out)])
    assert code == EXIT_OK
    rep = read_report(str(out))
    assert rep["valid"] is True
    assert rep["objective"] == pytest.approx(0.0398, abs=5e-4)
    assert rep["max_residual"] <= 1e-10


def test_certify_potential_rejects_bad_h():
    assert run(["certify-potential", "--N", "1", "--h", "0.7"]) == EXIT_BAD_ARGS


def test_dump_model_counts(tmp_path):
    out = tmp_path / "m.txt"
    code = run(["dump-model", "--problem", "sc-grad", "--N", "1",
                "--mu", "0.1", "--out", str(out)])
    assert code == EXIT_OK
    head = out.read_text().splitlines()[0]
    assert "20 variables, 33 constraints" in head


def test_report_float_precision_roundtrip(tmp_path):
    vals = [1.0 / 3.0, math.pi, 0.1472533212898397, 1e-17]
    rep = {"floats": vals, "nested": {"x": vals[0]}, "flag": True,
           "none": None, "n": 3}
    path = tmp_path / "r.json"
    write_report(rep, str(path))
    back = read_report(str(path))
    assert back["floats"] == vals  # 17 significant digits are lossless
    assert back["nested"]["x"] == vals[0]
    assert back["flag"] is True and back["none"] is None and back["n"] == 3


def test_report_17_digit_rendering():
    text = dumps_report({"x": 0.1472533212898397})
    assert "0.14725332128983969" in text or "0.1472533212898397" in text


def test_solve_report_stage2_and_csv(tmp_path):
    out = tmp_path / "solve.json"
    code = run(["solve", "--problem", "gd-nomomentum", "--N", "2",
                "--stages", "2", "--out", str(out), "--csv"])
    assert code == EXIT_OK
    rep = read_report(str(out))
    assert "bnb" not in rep  # no stage-3 block without stage 3
    assert rep["objective"] == pytest.approx(0.065946, abs=1e-4)
    csv_path = tmp_path / "solve.h.csv"
    rows = csv_path.read_text().strip().splitlines()
    assert len(rows) == 3  # header plus the padded lower-triangular rows


def test_solve_evaluate_consistency(tmp_path):
    out = tmp_path / "solve.json"
    assert run(["solve", "--problem", "sc-grad", "--N", "1", "--mu", "0.1",
                "--stages", "2", "--out", str(out)]) == EXIT_OK
    rep = read_report(str(out))
    steps = write_steps(tmp_path, "h2.json", "h", rep["schedules"]["h"]["values"])
    out2 = tmp_path / "eval.json"
    assert run(["evaluate", "--problem", "sc-grad", "--N", "1", "--mu", "0.1",
                "--stepsizes", steps, "--out", str(out2)]) == EXIT_OK
    rep2 = read_report(str(out2))
    assert rep2["value"] == pytest.approx(rep["objective"], abs=1e-6)


def test_solve_deterministic_modulo_walltimes(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f"s{k}.json"
        assert run(["solve", "--problem", "sc-grad", "--N", "1",
                    "--mu", "0.1", "--stages", "3", "--seed", "3",
                    "--Mtilde", "1.1", "--out", str(out)]) == EXIT_OK
        rep = read_report(str(out))
        rep.pop("wall_times")
        rep["bnb"].pop("wall_time")
        outs.append(json.dumps(rep, sort_keys=True))
    assert outs[0] == outs[1]


def test_sparsify_from_solve_report(tmp_path):
    out = tmp_path / "solve.json"
    assert run(["solve", "--problem", "sc-grad", "--N", "1", "--mu", "0.1",
                "--stages", "3", "--Mtilde", "1.1", "--out", str(out)]) == EXIT_OK
    out2 = tmp_path / "sparse.json"
    assert run(["sparsify", "--in", str(out), "--out", str(out2)]) == EXIT_OK
    rep = read_report(str(out2))
    assert rep["z_rank"] == 1
    assert sorted(rep["lambda_support"]) == sorted(
        ["star,0", "star,1", "0,1", "1,star", "1,0"])


def test_bounds_command(tmp_path):
    out = tmp_path / "b.json"
    assert run(["bounds", "--problem", "sc-grad", "--N", "1", "--mu", "0.1",
                "--mode", "sdp", "--out", str(out)]) == EXIT_OK
    rep = read_report(str(out))
    assert rep["M_lambda"] == pytest.approx(1.0, abs=1e-2)
    assert rep["M_step"] == pytest.approx(2.0, abs=1e-2)
