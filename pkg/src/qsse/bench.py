"""Benchmark harness: run estimators on shared trajectories, score and report.

Every method in one benchmark cell sees the same trajectory object, hence the
same measurement frames. MAE tables are written with ``repr`` floats so they
parse back exactly; wall-clock timings live in a separate file because they
are the only non-deterministic output.
"""

from __future__ import annotations

import csv
import io
import os
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .estimators.base import EstimatorRun
from .estimators.ekf import EkfConfig, ekf_run
from .estimators.esn import EsnSetup, cached_init, esn_run
from .estimators.pf import PfConfig, pf_run
from .estimators.wls import WlsConfig, wls_run
from .network import NetworkCase, build_ybus, load_case
from .scenario import ScenarioConfig, ScenarioTrajectory, generate_trajectory, load_scenario
from .measurements import default_plan

METHODS = ("esn", "ekf", "pf", "wls")  # report column order
RAD2DEG = 180.0 / np.pi


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MethodConfigs:
    wls: WlsConfig = field(default_factory=WlsConfig)
    ekf: EkfConfig = field(default_factory=EkfConfig)
    pf: PfConfig = field(default_factory=PfConfig)
    esn: EsnSetup = field(default_factory=EsnSetup)

    @classmethod
    def from_dict(cls, d: dict | None) -> "MethodConfigs":
        d = d or {}
        unknown = set(d) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(wls=WlsConfig(**d.get("wls", {})), ekf=EkfConfig(**d.get("ekf", {})),
                   pf=PfConfig(**d.get("pf", {})), esn=EsnSetup.from_dict(d.get("esn", {})))

    def to_dict(self) -> dict:
        out = {name: asdict(getattr(self, name)) for name in METHODS}
        out["wls"].pop("r_diag")
        return out


def load_configs(source: str | Path | None = None, case_name: str | None = None) -> MethodConfigs:
    """Configs from a YAML file, else the bundled defaults for ``case_name``."""
    if source is not None:
        with open(source, encoding="utf-8") as fh:
            return MethodConfigs.from_dict(yaml.safe_load(fh))
    name = f"{case_name}.yaml" if case_name else None
    files = resources.files("qsse.configs")
    if name and files.joinpath(name).is_file():
        return MethodConfigs.from_dict(yaml.safe_load(files.joinpath(name).read_text(encoding="utf-8")))
    return MethodConfigs()


def run_method(method: str, traj: ScenarioTrajectory, ybus, cfg: MethodConfigs) -> EstimatorRun:
    plan = traj.plan
    if method == "wls":
        return wls_run(traj, plan, ybus, cfg.wls)
    if method == "ekf":
        return ekf_run(traj, plan, ybus, cfg.ekf)
    if method == "pf":
        return pf_run(traj, plan, ybus, cfg.pf)
    if method == "esn":
        return esn_run(traj, plan, ybus, cfg.esn)
    raise ValueError(f"unknown method {method!r}")


def prepare_method(method: str, traj: ScenarioTrajectory, cfg: MethodConfigs) -> None:
    """One-time setup kept out of the timed region (reservoir construction)."""
    if method == "esn":
        cached_init(cfg.esn.magnitude, traj.plan.m, traj.plan.n)
        cached_init(cfg.esn.angle, traj.plan.m, traj.plan.n)


# --------------------------------------------------------------------------
# scoring


def mae(estimates: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-column mean absolute error over the rows (time steps)."""
    estimates = np.asarray(estimates, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimates.shape != truth.shape:
        raise ValueError(f"estimate shape {estimates.shape} does not match truth {truth.shape}")
    if estimates.shape[0] == 0:
        raise ValueError("empty evaluation window")
    return np.mean(np.abs(estimates - truth), axis=0)


@dataclass(frozen=True, eq=False)
class MaeReport:
    """Per-bus errors of one run: magnitudes in p.u., angles in degrees."""

    method: str
    seed: int
    bus_ids: tuple[int, ...]
    per_bus_v: np.ndarray
    per_bus_theta: np.ndarray
    total_seconds: float
    events: tuple[str, ...] = ()
    failed: str | None = None

    @property
    def accumulated_v(self) -> float:
        return float(np.sum(self.per_bus_v))

    @property
    def accumulated_theta(self) -> float:
        return float(np.sum(self.per_bus_theta))

    @property
    def ok(self) -> bool:
        return self.failed is None


def score_run(run: EstimatorRun, traj: ScenarioTrajectory) -> MaeReport:
    v_true, th_true = traj.truth_array()
    rows = run.ks - 1
    return MaeReport(run.method, traj.seed, tuple(traj.plan.bus_ids),
                     mae(run.v, v_true[rows]), mae(run.theta, th_true[rows]) * RAD2DEG,
                     run.total_seconds, tuple(run.events))


def failed_report(method: str, traj: ScenarioTrajectory, message: str) -> MaeReport:
    n = traj.plan.n
    return MaeReport(method, traj.seed, tuple(traj.plan.bus_ids), np.full(n, np.nan), np.full(n, np.nan),
                     0.0, (), message)


@dataclass(eq=False)
class BenchmarkResult:
    case: str
    scenario: str
    methods: tuple[str, ...]
    seeds: tuple[int, ...]
    bus_ids: tuple[int, ...]
    reports: list[MaeReport]

    def of(self, method: str) -> list[MaeReport]:
        return [r for r in self.reports if r.method == method and r.ok]

    def failures(self) -> list[MaeReport]:
        return [r for r in self.reports if not r.ok]

    def mean_v(self, method: str) -> np.ndarray:
        return np.mean([r.per_bus_v for r in self.of(method)], axis=0)

    def mean_theta(self, method: str) -> np.ndarray:
        return np.mean([r.per_bus_theta for r in self.of(method)], axis=0)

    def mean_seconds(self, method: str) -> float:
        return float(np.mean([r.total_seconds for r in self.of(method)]))

    def total_seconds(self, method: str) -> float:
        return float(np.sum([r.total_seconds for r in self.of(method)]))


def thread_count(default: int = 1) -> int:
    raw = os.environ.get("QSSE_THREADS")
    if not raw:
        return default
    n = int(raw)
    if n < 1:
        raise ValueError("QSSE_THREADS must be a positive integer")
    return n


def _run_seed(case: NetworkCase, ybus, scenario: ScenarioConfig, seed: int,
              methods, cfg: MethodConfigs) -> list[MaeReport]:
    sc = scenario.with_seed(seed)
    plan = default_plan(case, sc.noise)
    traj = generate_trajectory(case, plan, sc.profile, sc.noise, sc.T, ybus=ybus)
    out = []
    for method in methods:
        try:
            prepare_method(method, traj, cfg)
            run = run_method(method, traj, ybus, cfg)
            out.append(score_run(run, traj))
        except Exception as exc:  # recorded, the benchmark carries on
            msg = f"{type(exc).__name__}: {exc}"
            out.append(failed_report(method, traj, msg + "\n" + traceback.format_exc(limit=3)))
    return out


def run_benchmark(case: str | NetworkCase, scenario: str | ScenarioConfig, methods=METHODS,
                  seeds=range(10), configs: MethodConfigs | None = None,
                  threads: int | None = None) -> BenchmarkResult:
    """Score every method on every seed; seeds run concurrently up to ``threads``.

    BLAS is pinned to one thread so numbers do not depend on the worker count.
    """
    case = case if isinstance(case, NetworkCase) else load_case(case)
    scenario = scenario if isinstance(scenario, ScenarioConfig) else load_scenario(scenario)
    methods = tuple(methods)
    if not methods:
        raise ValueError("need at least one estimator")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    seeds = tuple(int(s) for s in seeds)
    configs = configs or load_configs(case_name=case.name)
    threads = threads or thread_count()
    ybus = build_ybus(case)
    with threadpool_limits(limits=1):
        if threads == 1:
            chunks = [_run_seed(case, ybus, scenario, s, methods, configs) for s in seeds]
        else:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                chunks = list(pool.map(lambda s: _run_seed(case, ybus, scenario, s, methods, configs), seeds))
    reports = [r for chunk in chunks for r in chunk]
    return BenchmarkResult(case.name, scenario.name, methods, seeds, tuple(case.bus_ids.tolist()), reports)


# --------------------------------------------------------------------------
# reports


def _ordered(methods) -> list[str]:
    return [m for m in METHODS if m in methods]


def _fmt(x: float) -> str:
    return repr(float(x))


def table_rows(result: BenchmarkResult, metric: str) -> tuple[list[str], list[list[str]]]:
    """Seed-averaged per-bus table with columns Bus, ESN, EKF, PF, WLS."""
    methods = [m for m in _ordered(result.methods) if result.of(m)]
    getter = result.mean_theta if metric == "theta" else result.mean_v
    cols = {m: getter(m) for m in methods}
    header = ["Bus"] + [m.upper() for m in methods]
    rows = [[str(b)] + [_fmt(cols[m][i]) for m in methods] for i, b in enumerate(result.bus_ids)]
    return header, rows


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def read_csv_table(text: str) -> tuple[list[str], list[list[str]]]:
    rows = list(csv.reader(io.StringIO(text)))
    return rows[0], rows[1:]


def to_markdown(header, rows, digits: int = 4) -> str:
    def cell(x):
        try:
            return f"{float(x):.{digits}f}" if "." in x or "e" in x else x
        except ValueError:
            return x
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(cell(c) for c in row) + " |" for row in rows]
    return "\n".join(lines) + "\n"


def long_rows(result: BenchmarkResult) -> tuple[list[str], list[list[str]]]:
    header = ["method", "seed", "bus", "metric", "value"]
    rows = []
    for m in _ordered(result.methods):
        for r in sorted(result.of(m), key=lambda r: r.seed):
            for i, b in enumerate(r.bus_ids):
                rows.append([m, str(r.seed), str(b), "v_pu", _fmt(r.per_bus_v[i])])
                rows.append([m, str(r.seed), str(b), "theta_deg", _fmt(r.per_bus_theta[i])])
    return header, rows


def accumulated_rows(result: BenchmarkResult) -> tuple[list[str], list[list[str]]]:
    methods = [m for m in _ordered(result.methods) if result.of(m)]
    header = ["quantity"] + [m.upper() for m in methods]
    th = [_fmt(np.sum(result.mean_theta(m))) for m in methods]
    v = [_fmt(np.sum(result.mean_v(m))) for m in methods]
    return header, [["angle_deg"] + th, ["magnitude_pu"] + v]


def timing_rows(result: BenchmarkResult) -> tuple[list[str], list[list[str]]]:
    header = ["method", "mean_seconds", "total_seconds", "runs"]
    rows = [[m, f"{result.mean_seconds(m):.6f}", f"{result.total_seconds(m):.6f}", str(len(result.of(m)))]
            for m in _ordered(result.methods) if result.of(m)]
    return header, rows


def emit_report(result: BenchmarkResult, out: str | Path, formats=("csv", "markdown")) -> list[Path]:
    """Write the per-bus tables, accumulated table, long-format series and timings."""
    if not result.reports:
        raise ValueError("nothing to report")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{result.case}_{result.scenario}"
    tables = {
        "mae_theta": table_rows(result, "theta"),
        "mae_v": table_rows(result, "v"),
        "accumulated": accumulated_rows(result),
    }
    written = []
    for name, (header, rows) in tables.items():
        if "csv" in formats:
            p = out / f"{stem}_{name}.csv"
            p.write_text(to_csv(header, rows), encoding="utf-8")
            written.append(p)
        if "markdown" in formats:
            p = out / f"{stem}_{name}.md"
            p.write_text(to_markdown(header, rows), encoding="utf-8")
            written.append(p)
    for name, (header, rows) in (("long", long_rows(result)), ("timing", timing_rows(result))):
        p = out / f"{stem}_{name}.csv"
        p.write_text(to_csv(header, rows), encoding="utf-8")
        written.append(p)
    fails = result.failures()
    if fails:
        p = out / f"{stem}_failures.txt"
        p.write_text("".join(f"{r.method} seed={r.seed}: {r.failed}\n" for r in fails), encoding="utf-8")
        written.append(p)
    return written


# --------------------------------------------------------------------------
# ordering checks


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


def count_below(a: np.ndarray, b: np.ndarray, buses=None) -> int:
    idx = slice(None) if buses is None else buses
    return int(np.sum(np.asarray(a)[idx] < np.asarray(b)[idx]))


def timing_check(result: BenchmarkResult) -> list[Check]:
    present = [m for m in ("esn", "wls", "ekf", "pf") if result.of(m)]
    if len(present) < 2:
        return []
    t = {m: result.total_seconds(m) for m in present}
    order = sorted(present, key=t.get)
    want = [m for m in ("esn", "wls", "ekf", "pf") if m in present]
    checks = [Check(f"timing order {result.case}/{result.scenario}", order == want,
                    " < ".join(f"{m.upper()} {t[m]:.3f}s" for m in order))]
    if "esn" in t and "wls" in t:
        ratio = t["esn"] / t["wls"]
        checks.append(Check(f"ESN/WLS time {result.case}/{result.scenario}", ratio <= 0.9, f"ratio {ratio:.3f}"))
    return checks


def ordering_checks(results: list[BenchmarkResult]) -> list[Check]:
    """Orderings that apply to the given results (per case/scenario and across scenarios)."""
    checks = []
    by_key = {(r.case, r.scenario): r for r in results}
    for r in results:
        checks += timing_check(r)
        n = len(r.bus_ids)
        need = n - 1
        if r.scenario == "normal" and r.of("ekf") and r.of("wls"):
            c = count_below(r.mean_theta("ekf"), r.mean_theta("wls"))
            checks.append(Check(f"EKF angle < WLS {r.case}", c >= need, f"{c}/{n} buses"))
        if r.scenario == "normal" and r.of("esn") and r.of("wls"):
            c = count_below(r.mean_v("esn"), r.mean_v("wls"))
            checks.append(Check(f"ESN magnitude < WLS {r.case}", c >= need, f"{c}/{n} buses"))
    for (case, scen), sud in by_key.items():
        if scen != "sudden" or (case, "normal") not in by_key:
            continue
        nor = by_key[(case, "normal")]
        if 9 in sud.bus_ids and sud.of("ekf") and nor.of("ekf"):
            i = sud.bus_ids.index(9)
            f_ekf = sud.mean_theta("ekf")[i] / nor.mean_theta("ekf")[i]
            checks.append(Check(f"EKF bus-9 degradation {case}", f_ekf >= 2.0, f"x{f_ekf:.2f}"))
            if sud.of("esn") and nor.of("esn"):
                f_esn = sud.mean_theta("esn")[i] / nor.mean_theta("esn")[i]
                checks.append(Check(f"ESN degrades less than EKF at bus 9 {case}", f_esn < f_ekf,
                                    f"ESN x{f_esn:.2f} vs EKF x{f_ekf:.2f}"))
    for r in results:
        if r.scenario == "sudden" and r.of("pf") and r.of("ekf"):
            idx = [r.bus_ids.index(b) for b in range(9, 15) if b in r.bus_ids]
            if idx:
                c = count_below(r.mean_theta("pf"), r.mean_theta("ekf"), idx)
                checks.append(Check(f"PF angle < EKF on buses 9-14 {r.case}", c > len(idx) / 2,
                                    f"{c}/{len(idx)} buses"))
    return checks
