import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qsse import bench
from qsse.bench import (BenchmarkResult, Check, MaeReport, MethodConfigs, accumulated_rows, emit_report,
                        load_configs, long_rows, mae, ordering_checks, read_csv_table, run_benchmark,
                        table_rows, thread_count, to_csv, to_markdown)


def test_mae_example():
    assert mae(np.array([[1.0], [1.0]]), np.array([[1.0], [1.1]]))[0] == pytest.approx(0.05)


@settings(max_examples=50)
@given(arrays(float, (5, 3), elements=st.floats(-10, 10)), arrays(float, (5, 3), elements=st.floats(-10, 10)),
       st.floats(-5, 5))
def test_mae_translation_invariant(a, b, c):
    assert np.allclose(mae(a + c, b + c), mae(a, b), atol=1e-9)
    assert np.all(mae(a, b) >= 0)


def test_mae_rejects_bad_input():
    with pytest.raises(ValueError):
        mae(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        mae(np.zeros((0, 2)), np.zeros((0, 2)))


SECONDS = {"esn": 0.1, "wls": 0.2, "ekf": 0.5, "pf": 1.0}


def fake_result(scenario="normal", values=None):
    rng = np.random.default_rng(3)
    ids = tuple(range(1, 15))
    reports = []
    for m in bench.METHODS:
        for s in (0, 1):
            v = rng.uniform(0, 0.01, 14) if values is None else values[m][0]
            th = rng.uniform(0, 0.5, 14) if values is None else values[m][1]
            reports.append(MaeReport(m, s, ids, v, th, SECONDS[m]))
    return BenchmarkResult("ieee14", scenario, bench.METHODS, (0, 1), ids, reports)


def test_tables_have_a_row_per_bus():
    res = fake_result()
    header, rows = table_rows(res, "theta")
    assert header == ["Bus", "ESN", "EKF", "PF", "WLS"]
    assert len(rows) == 14 and [r[0] for r in rows] == [str(b) for b in range(1, 15)]
    md = to_markdown(header, rows)
    assert md.splitlines()[0] == "| Bus | ESN | EKF | PF | WLS |"
    assert len(md.splitlines()) == 16


def test_csv_round_trip_is_exact():
    res = fake_result()
    header, rows = table_rows(res, "v")
    h2, r2 = read_csv_table(to_csv(header, rows))
    assert h2 == header and r2 == rows
    assert np.array_equal(np.array(r2)[:, 1].astype(float), res.mean_v("esn"))


def test_accumulated_is_sum_of_bus_means():
    res = fake_result()
    header, rows = accumulated_rows(res)
    for j, m in enumerate(["esn", "ekf", "pf", "wls"], start=1):
        assert abs(float(rows[0][j]) - res.mean_theta(m).sum()) <= 1e-12
        assert abs(float(rows[1][j]) - res.mean_v(m).sum()) <= 1e-12


def test_long_rows_cover_every_cell():
    res = fake_result()
    _, rows = long_rows(res)
    assert len(rows) == 4 * 2 * 14 * 2


def test_emit_report_writes_files(tmp_path):
    paths = emit_report(fake_result(), tmp_path)
    names = {p.name for p in paths}
    for stem in ("mae_theta", "mae_v", "accumulated"):
        assert f"ieee14_normal_{stem}.csv" in names and f"ieee14_normal_{stem}.md" in names
    assert "ieee14_normal_long.csv" in names and "ieee14_normal_timing.csv" in names


def _pattern(ekf_sudden_factor, esn_sudden_factor):
    base = np.full(14, 0.1)
    nor = {"esn": (base * 0.5, base * 0.5), "ekf": (base, base * 0.5), "pf": (base * 2, base),
           "wls": (base * 1.5, base * 2)}
    sud = {k: (v[0], v[1].copy()) for k, v in nor.items()}
    sud["ekf"][1][8] *= ekf_sudden_factor
    sud["esn"][1][8] *= esn_sudden_factor
    sud["pf"] = (base * 2, base * 0.2)
    return fake_result("normal", nor), fake_result("sudden", sud)


def test_ordering_checks_pass_on_expected_pattern():
    checks = {c.name: c for c in ordering_checks(list(_pattern(9.0, 4.0)))}
    for name in ("EKF angle < WLS ieee14", "ESN magnitude < WLS ieee14", "EKF bus-9 degradation ieee14",
                 "ESN degrades less than EKF at bus 9 ieee14", "PF angle < EKF on buses 9-14 ieee14",
                 "timing order ieee14/normal"):
        assert checks[name].passed, checks[name].line()
    assert checks["ESN/WLS time ieee14/normal"].passed


def test_ordering_checks_fail_when_esn_degrades_more():
    checks = {c.name: c for c in ordering_checks(list(_pattern(3.0, 5.0)))}
    assert not checks["ESN degrades less than EKF at bus 9 ieee14"].passed
    assert checks["EKF bus-9 degradation ieee14"].passed
    assert Check("x", False, "y").line() == "FAIL x: y"


def test_thread_count_env(monkeypatch):
    monkeypatch.delenv("QSSE_THREADS", raising=False)
    assert thread_count() == 1
    monkeypatch.setenv("QSSE_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("QSSE_THREADS", "0")
    with pytest.raises(ValueError):
        thread_count()


def test_configs_round_trip_and_validation(tmp_path):
    import yaml
    cfg = MethodConfigs()
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(cfg.to_dict()))
    assert load_configs(p) == cfg
    with pytest.raises(ValueError):
        MethodConfigs.from_dict({"kalman": {}})
    assert load_configs(case_name="ieee300") == cfg


def test_benchmark_rejects_empty_or_unknown_methods(case14):
    with pytest.raises(ValueError):
        run_benchmark(case14, "normal", methods=(), seeds=[0])
    with pytest.raises(ValueError):
        run_benchmark(case14, "normal", methods=("lstm",), seeds=[0])


def test_failure_is_recorded_and_others_continue(case14, monkeypatch):
    real = bench.run_method

    def flaky(method, *a):
        if method == "ekf":
            raise np.linalg.LinAlgError("boom")
        return real(method, *a)

    monkeypatch.setattr(bench, "run_method", flaky)
    res = run_benchmark(case14, "normal", methods=("wls", "ekf"), seeds=[0])
    assert len(res.of("wls")) == 1 and not res.of("ekf")
    (f,) = res.failures()
    assert f.method == "ekf" and "boom" in f.failed


@pytest.mark.slow
def test_csv_identical_across_thread_counts(case14, tmp_path, monkeypatch):
    outs = []
    for threads in ("1", "2"):
        monkeypatch.setenv("QSSE_THREADS", threads)
        res = run_benchmark(case14, "sudden", methods=("esn", "ekf", "pf", "wls"), seeds=[0, 1])
        d = tmp_path / threads
        emit_report(res, d, formats=("csv",))
        outs.append({p.name: p.read_bytes() for p in d.glob("*.csv") if "timing" not in p.name})
    assert outs[0] == outs[1]
    assert len(outs[0]) == 4
