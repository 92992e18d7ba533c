import csv

import pytest

from qsse.cli import _seeds, grid_points, main


def test_seed_parsing():
    assert _seeds("3") == [0, 1, 2]
    assert _seeds("4,7") == [4, 7]


def test_grid_points_product():
    pts = grid_points({"magnitude": {"leak": [0.1, 0.2]}, "angle": {"leak": [0.3], "seed": [1, 2, 3]}})
    assert len(pts) == 6
    assert {p["magnitude"]["leak"] for p in pts} == {0.1, 0.2}


def test_case_validate(capsys):
    assert main(["case", "validate", "ieee14"]) == 0
    assert "14 buses, 20 branches" in capsys.readouterr().out


def test_case_validate_bad_file(tmp_path, capsys):
    bad = tmp_path / "bad.m"
    bad.write_text("function mpc = bad\nmpc.baseMVA = 100;\n")
    assert main(["case", "validate", str(bad)]) == 1
    assert "invalid case" in capsys.readouterr().err


def test_ybus_dump(tmp_path):
    out = tmp_path / "y.csv"
    assert main(["case", "ybus", "ieee14", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 14 + 2 * 20
    diag = {int(r["row_bus"]): float(r["b"]) for r in rows if r["row_bus"] == r["col_bus"]}
    assert len(diag) == 14


def test_powerflow(tmp_path, capsys):
    out = tmp_path / "pf.csv"
    assert main(["powerflow", "ieee14", "--out", str(out)]) == 0
    assert "converged=True" in capsys.readouterr().err
    rows = list(csv.DictReader(out.open()))
    assert float(rows[0]["v_pu"]) == pytest.approx(1.06)
    assert float(rows[13]["theta_deg"]) == pytest.approx(-16.0336, abs=2e-3)


@pytest.mark.parametrize("method", ["wls", "ekf", "pf", "esn"])
def test_scenario_then_estimate(tmp_path, capsys, method):
    bundle = tmp_path / "traj"
    assert main(["scenario", "generate", "--case", "ieee14", "--scenario", "normal", "--seed", "2",
                 "--out", str(bundle)]) == 0
    out = tmp_path / "est.csv"
    assert main(["estimate", method, str(bundle), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 70 * 14
    assert all(0.5 < float(r["v"]) < 1.5 for r in rows)
    assert rows[0]["k"] == "31" and rows[-1]["k"] == "100"
    assert "accumulated MAE" in capsys.readouterr().err


def test_bench_quick(tmp_path, capsys):
    code = main(["bench", "--case", "ieee14", "--scenario", "normal", "--methods", "wls,ekf",
                 "--seeds", "1", "--out", str(tmp_path)])
    assert code == 0
    out = capsys.readouterr().out
    assert "| quantity | EKF | WLS |" in out
    assert "EKF angle < WLS ieee14" in out
    assert (tmp_path / "ieee14_normal_mae_theta.csv").is_file()


def test_bench_requires_methods(capsys):
    assert main(["bench", "--methods", ",", "--seeds", "1"]) == 2


def test_tune_writes_ranking(tmp_path):
    grid = tmp_path / "g.yaml"
    grid.write_text("angle: {leak: [0.2, 0.3]}\n")
    out = tmp_path / "rank.csv"
    best = tmp_path / "best.yaml"
    assert main(["tune", "esn", "--seeds", "1", "--grid", str(grid), "--out", str(out),
                 "--best-out", str(best)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 2
    assert float(rows[0]["acc_theta_deg"]) <= float(rows[1]["acc_theta_deg"])
    from qsse.bench import load_configs
    assert load_configs(best).esn.angle.leak in (0.2, 0.3)
