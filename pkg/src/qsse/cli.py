"""Command line entry point: ``qsse <command> ...``."""

from __future__ import annotations

import argparse
import itertools
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import bench
from .network import CaseError, build_ybus, load_case
from .powerflow import run_base_case
from .scenario import load_bundle, load_scenario, make_trajectory, save_bundle


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _seeds(spec: str) -> list[int]:
    """``10`` means seeds 0..9; ``3,5,8`` lists seeds explicitly."""
    if "," in spec:
        return [int(s) for s in spec.split(",") if s]
    return list(range(int(spec)))


def cmd_case(args) -> int:
    try:
        case = load_case(args.case)
    except (CaseError, OSError) as exc:
        print(f"invalid case: {exc}", file=sys.stderr)
        return 1
    if args.action == "validate":
        print(f"{case.name}: {case.n_bus} buses, {case.n_branch} branches, slack bus "
              f"{case.buses[case.slack_index].id}")
        return 0
    Y = build_ybus(case).ybus.tocoo()
    rows = ["row_bus,col_bus,g,b"]
    ids = case.bus_ids
    for i, j, y in sorted(zip(Y.row, Y.col, Y.data)):
        rows.append(f"{ids[i]},{ids[j]},{float(y.real)!r},{float(y.imag)!r}")
    _write("\n".join(rows) + "\n", args.out)
    return 0


def cmd_powerflow(args) -> int:
    case = load_case(args.case)
    sol = run_base_case(case, tol=args.tol)
    print(f"converged={sol.converged} iterations={sol.iterations} max_mismatch={sol.max_mismatch:.3e}",
          file=sys.stderr)
    lines = ["bus,v_pu,theta_deg"]
    for bid, v, th in zip(case.bus_ids, sol.state.v, np.degrees(sol.state.theta)):
        lines.append(f"{bid},{v:.6f},{th:.6f}")
    _write("\n".join(lines) + "\n", args.out)
    return 0 if sol.converged else 2


def cmd_scenario(args) -> int:
    traj = make_trajectory(args.case, args.scenario, seed=args.seed)
    save_bundle(traj, args.out)
    print(f"wrote {traj.T} steps to {args.out}", file=sys.stderr)
    return 0


def _method_configs(path: str | None, case_name: str) -> bench.MethodConfigs:
    return bench.load_configs(path, case_name=case_name)


def cmd_estimate(args) -> int:
    traj = load_bundle(args.bundle)
    cfg = _method_configs(args.config, traj.case.name)
    ybus = build_ybus(traj.case)
    bench.prepare_method(args.method, traj, cfg)
    run = bench.run_method(args.method, traj, ybus, cfg)
    rep = bench.score_run(run, traj)
    lines = ["k,bus,v,theta"]
    for row, k in enumerate(run.ks):
        for i, bid in enumerate(traj.plan.bus_ids):
            lines.append(f"{k},{bid},{float(run.v[row, i])!r},{float(run.theta[row, i])!r}")
    _write("\n".join(lines) + "\n", args.out)
    for e in run.events:
        print(f"event: {e}", file=sys.stderr)
    print(f"{args.method}: {run.total_seconds:.3f}s accumulated MAE angle {rep.accumulated_theta:.4f} deg, "
          f"magnitude {rep.accumulated_v:.5f} pu", file=sys.stderr)
    return 0


DEFAULT_GRID = {
    "magnitude": {"leak": [1.63e-2, 5e-2], "spectral_radius": [0.3, 0.6]},
    "angle": {"leak": [0.1, 0.2], "ridge_epsilon": [1.5e-5, 1e-6]},
}


def grid_points(grid: dict) -> list[dict]:
    """Cartesian product over ``{network: {key: [values]}}``."""
    axes = [(net, key, vals) for net in ("magnitude", "angle") for key, vals in grid.get(net, {}).items()]
    points = []
    for combo in itertools.product(*(vals for _, _, vals in axes)):
        p: dict = {"magnitude": {}, "angle": {}}
        for (net, key, _), val in zip(axes, combo):
            p[net][key] = val
        points.append(p)
    return points


def tune_esn(case: str, scenario: str, seeds, grid: dict, base: bench.MethodConfigs):
    """Score every grid point; rows sorted by accumulated angle MAE, then magnitude."""
    case_obj = load_case(case)
    ybus = build_ybus(case_obj)
    scen = load_scenario(scenario)
    trajs = [make_trajectory(case_obj, scen, seed=s, ybus=ybus) for s in seeds]
    rows = []
    for p in grid_points(grid):
        setup = replace(base.esn, magnitude=replace(base.esn.magnitude, **p["magnitude"]),
                        angle=replace(base.esn.angle, **p["angle"]))
        cfg = replace(base, esn=setup)
        acc_v, acc_th, secs = [], [], []
        for traj in trajs:
            bench.prepare_method("esn", traj, cfg)
            run = bench.run_method("esn", traj, ybus, cfg)
            rep = bench.score_run(run, traj)
            acc_v.append(rep.accumulated_v)
            acc_th.append(rep.accumulated_theta)
            secs.append(run.total_seconds)
        rows.append((float(np.mean(acc_th)), float(np.mean(acc_v)), float(np.mean(secs)), p))
    rows.sort(key=lambda r: (r[0], r[1]))
    return rows


def cmd_tune(args) -> int:
    grid = DEFAULT_GRID
    if args.grid:
        with open(args.grid, encoding="utf-8") as fh:
            grid = yaml.safe_load(fh)
    base = _method_configs(args.config, Path(args.case).stem)
    rows = tune_esn(args.case, args.scenario, _seeds(args.seeds), grid, base)
    lines = ["rank,acc_theta_deg,acc_v_pu,seconds,params"]
    for i, (th, v, s, p) in enumerate(rows, start=1):
        lines.append(f"{i},{th!r},{v!r},{s:.4f},\"{yaml.safe_dump(p, default_flow_style=True).strip()}\"")
    _write("\n".join(lines) + "\n", args.out)
    if args.best_out:
        best_th = min(rows, key=lambda r: r[0])[3]["angle"]
        best_v = min(rows, key=lambda r: r[1])[3]["magnitude"]
        d = base.to_dict()
        d["esn"]["magnitude"].update(best_v)
        d["esn"]["angle"].update(best_th)
        Path(args.best_out).write_text(yaml.safe_dump(d, sort_keys=True), encoding="utf-8")
    return 0


def cmd_bench(args) -> int:
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        print("need at least one method", file=sys.stderr)
        return 2
    results = []
    for scenario in args.scenario.split(","):
        case = load_case(args.case)
        cfg = _method_configs(args.config, case.name)
        res = bench.run_benchmark(case, scenario, methods, _seeds(args.seeds), cfg)
        if args.out:
            for p in bench.emit_report(res, args.out):
                print(f"wrote {p}", file=sys.stderr)
        for f in res.failures():
            print(f"failure: {f.method} seed {f.seed}: {f.failed.splitlines()[0]}", file=sys.stderr)
        results.append(res)
        header, rows = bench.accumulated_rows(res)
        print(f"## {res.case} / {res.scenario}")
        print(bench.to_markdown(header, rows))
        header, rows = bench.timing_rows(res)
        print(bench.to_markdown(header, rows))
    checks = bench.ordering_checks(results)
    for c in checks:
        print(c.line())
    if args.check and not all(c.passed for c in checks):
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qsse", description="Quasi-steady-state estimation toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("case", help="validate a case or dump its admittance matrix")
    p.add_argument("action", choices=["validate", "ybus"])
    p.add_argument("case", help="bundled name (ieee14, ieee300) or case file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_case)

    p = sub.add_parser("powerflow", help="solve the base-case power flow")
    p.add_argument("case")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_powerflow)

    p = sub.add_parser("scenario", help="generate a trajectory bundle")
    p.add_argument("action", choices=["generate"])
    p.add_argument("--case", default="ieee14")
    p.add_argument("--scenario", default="normal", help="normal, sudden or a YAML file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("estimate", help="run one estimator on a trajectory bundle")
    p.add_argument("method", choices=list(bench.METHODS))
    p.add_argument("bundle")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("tune", help="grid search of ESN hyperparameters")
    p.add_argument("target", choices=["esn"])
    p.add_argument("--case", default="ieee14")
    p.add_argument("--scenario", default="normal")
    p.add_argument("--seeds", default="3")
    p.add_argument("--grid", help="YAML {magnitude: {key: [values]}, angle: {...}}")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--best-out", help="write the best config as YAML")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", help="seeded benchmark with CSV/markdown reports")
    p.add_argument("--case", default="ieee14")
    p.add_argument("--scenario", default="normal,sudden", help="comma list of scenarios")
    p.add_argument("--methods", default=",".join(bench.METHODS))
    p.add_argument("--seeds", default="10")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--check", action="store_true", help="exit nonzero if an ordering check fails")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
