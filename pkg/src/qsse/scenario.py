"""Quasi-steady load trajectories and their noisy measurement streams."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .measurements import (MeasurementFrame, MeasurementPlan, NoiseConfig, add_noise, default_plan,
                           evaluate_h, format_plan, frames_from_csv, frames_to_csv, parse_plan)
from .network import AdmittanceMatrix, NetworkCase, build_ybus, load_case, parse_matpower, to_matpower
from .powerflow import PowerFlowError, injection_spec, solve_power_flow
from .state import StateVector

HORIZON = 100
WARMUP = 30


@dataclass(frozen=True)
class LoadEvent:
    k: int
    bus: int
    multiplier: float
    duration: int = 1

    def __post_init__(self):
        if not self.multiplier > 0:
            raise ValueError(f"event multiplier must be positive, got {self.multiplier}")
        if self.duration < 1:
            raise ValueError("event duration must be at least one step")

    def active(self, k: int) -> bool:
        return self.k <= k < self.k + self.duration


@dataclass(frozen=True)
class LoadProfile:
    """Linear load drift on ``trend_buses`` plus multiplicative events.

    ``trend_buses=None`` means every bus that carries load.
    """

    trend_fraction: float = 0.01
    trend_buses: tuple[int, ...] | None = None
    events: tuple[LoadEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(
            e if isinstance(e, LoadEvent) else LoadEvent(**e) for e in self.events))
        if self.trend_buses is not None:
            object.__setattr__(self, "trend_buses", tuple(int(b) for b in self.trend_buses))

    def validate(self, case: NetworkCase, T: int) -> None:
        ids = set(case.bus_ids.tolist())
        for e in self.events:
            if e.bus not in ids:
                raise ValueError(f"event references unknown bus {e.bus}")
            if not 1 <= e.k <= T:
                raise ValueError(f"event step {e.k} outside horizon 1..{T}")
        for b in self.trend_buses or ():
            if b not in ids:
                raise ValueError(f"trend bus {b} not in case")


def normal_operation(trend_fraction: float = 0.01) -> LoadProfile:
    return LoadProfile(trend_fraction=trend_fraction)


def sudden_load_change(bus: int = 9, k: int = 70, multiplier: float = 3.0,
                       trend_fraction: float = 0.01) -> LoadProfile:
    return LoadProfile(trend_fraction=trend_fraction, events=(LoadEvent(k, bus, multiplier, 1),))


def trend_mask(case: NetworkCase, profile: LoadProfile) -> np.ndarray:
    if profile.trend_buses is None:
        return np.array([b.load_p != 0 or b.load_q != 0 for b in case.buses])
    chosen = set(profile.trend_buses)
    return np.array([b.id in chosen for b in case.buses])


def load_at_step(base_p: np.ndarray, base_q: np.ndarray, profile: LoadProfile, k: int, T: int,
                 mask: np.ndarray | None = None, bus_ids=None) -> tuple[np.ndarray, np.ndarray]:
    """Per-bus (P, Q) load at step ``k`` (1-based) of a ``T``-step horizon.

    ``mask`` selects the trend buses (all buses when omitted); ``bus_ids`` maps
    positions to ids for event lookup (positions are ``1..n`` when omitted).
    """
    if not 1 <= k <= T:
        raise ValueError(f"step {k} outside 1..{T}")
    p = np.array(base_p, dtype=float)
    q = np.array(base_q, dtype=float)
    if mask is None:
        mask = np.ones(p.size, dtype=bool)
    scale = 1.0 + profile.trend_fraction * (k - 1) / (T - 1) if T > 1 else 1.0
    p[mask] *= scale
    q[mask] *= scale
    ids = list(bus_ids) if bus_ids is not None else list(range(1, p.size + 1))
    for e in profile.events:
        if e.active(k):
            i = ids.index(e.bus)
            p[i] *= e.multiplier
            q[i] *= e.multiplier
    return p, q


@dataclass(eq=False)
class ScenarioTrajectory:
    case: NetworkCase
    plan: MeasurementPlan
    profile: LoadProfile
    noise: NoiseConfig
    truth: list[StateVector]
    frames: list[MeasurementFrame]
    iterations: list[int] = field(default_factory=list)

    @property
    def T(self) -> int:
        return len(self.truth)

    @property
    def seed(self) -> int:
        return self.noise.seed

    def truth_array(self) -> tuple[np.ndarray, np.ndarray]:
        """(v, theta) as (T, n) arrays."""
        return np.array([s.v for s in self.truth]), np.array([s.theta for s in self.truth])

    def z_array(self) -> np.ndarray:
        return np.array([f.z for f in self.frames])


class ScenarioError(RuntimeError):
    def __init__(self, k: int, message: str):
        self.k = k
        super().__init__(f"step {k}: {message}")


def generate_trajectory(case: NetworkCase, plan: MeasurementPlan | None, profile: LoadProfile,
                        noise: NoiseConfig, T: int = HORIZON, ybus: AdmittanceMatrix | None = None,
                        tol: float = 1e-8, max_iter: int = 20) -> ScenarioTrajectory:
    """Run one power flow per step (warm-started) and measure each operating point."""
    profile.validate(case, T)
    ybus = ybus or build_ybus(case)
    plan = plan or default_plan(case, noise)
    base_p, base_q = case.base_loads()
    mask = trend_mask(case, profile)
    ids = case.bus_ids.tolist()
    truth, frames, iters = [], [], []
    start = None
    for k in range(1, T + 1):
        pd, qd = load_at_step(base_p, base_q, profile, k, T, mask, ids)
        ps, qs = injection_spec(case, pd, qd)
        try:
            sol = solve_power_flow(case, ybus, ps, qs, start=start, tol=tol, max_iter=max_iter)
        except PowerFlowError as exc:
            raise ScenarioError(k, str(exc)) from exc
        if not sol.converged:
            raise ScenarioError(k, f"power flow did not converge (mismatch {sol.max_mismatch:.3e})")
        start = sol.state
        truth.append(sol.state)
        iters.append(sol.iterations)
        frames.append(add_noise(evaluate_h(sol.state, plan, ybus), plan, noise, k))
    return ScenarioTrajectory(case, plan, profile, noise, truth, frames, iters)


# --------------------------------------------------------------------------
# configuration and bundles


def profile_from_dict(d: dict) -> LoadProfile:
    events = tuple(LoadEvent(**e) for e in d.get("events", ()))
    buses = d.get("trend_buses")
    return LoadProfile(trend_fraction=float(d.get("trend_fraction", 0.01)),
                       trend_buses=tuple(buses) if buses is not None else None, events=events)


def profile_to_dict(p: LoadProfile) -> dict:
    return {"trend_fraction": p.trend_fraction,
            "trend_buses": list(p.trend_buses) if p.trend_buses is not None else None,
            "events": [asdict(e) for e in p.events]}


@dataclass(frozen=True)
class ScenarioConfig:
    name: str = "normal"
    profile: LoadProfile = field(default_factory=normal_operation)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    T: int = HORIZON

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        noise = NoiseConfig(**d.get("noise", {}))
        return cls(name=d.get("name", "scenario"), profile=profile_from_dict(d.get("profile", {})),
                   noise=noise, T=int(d.get("T", HORIZON)))

    def to_dict(self) -> dict:
        return {"name": self.name, "T": self.T, "profile": profile_to_dict(self.profile),
                "noise": asdict(self.noise)}

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return ScenarioConfig(self.name, self.profile, NoiseConfig(**{**asdict(self.noise), "seed": seed}), self.T)


BUILTIN_SCENARIOS = {
    "normal": ScenarioConfig("normal", normal_operation()),
    "sudden": ScenarioConfig("sudden", sudden_load_change()),
}


def load_scenario(source: str | Path) -> ScenarioConfig:
    """Built-in scenario name ('normal', 'sudden') or a YAML file."""
    if str(source) in BUILTIN_SCENARIOS:
        return BUILTIN_SCENARIOS[str(source)]
    with open(source, encoding="utf-8") as fh:
        return ScenarioConfig.from_dict(yaml.safe_load(fh) or {})


def truth_to_csv(traj: ScenarioTrajectory) -> str:
    lines = ["k,bus,v,theta"]
    for k, s in enumerate(traj.truth, start=1):
        for bid, v, th in zip(traj.plan.bus_ids, s.v, s.theta):
            lines.append(f"{k},{bid},{float(v)!r},{float(th)!r}")
    return "\n".join(lines) + "\n"


def save_bundle(traj: ScenarioTrajectory, out: str | Path) -> Path:
    """Write case.m, plan.txt, truth.csv, frames.csv and meta.json to ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "case.m").write_text(to_matpower(traj.case), encoding="utf-8")
    (out / "plan.txt").write_text(format_plan(traj.plan), encoding="utf-8")
    (out / "truth.csv").write_text(truth_to_csv(traj), encoding="utf-8")
    (out / "frames.csv").write_text(frames_to_csv(traj.frames), encoding="utf-8")
    meta = {"case": traj.case.name, "T": traj.T, "profile": profile_to_dict(traj.profile),
            "noise": asdict(traj.noise), "pf_iterations": traj.iterations}
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_bundle(path: str | Path) -> ScenarioTrajectory:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text(encoding="utf-8"))
    case = parse_matpower((path / "case.m").read_text(encoding="utf-8"), name=meta["case"])
    plan = parse_plan((path / "plan.txt").read_text(encoding="utf-8"), case)
    frames = frames_from_csv((path / "frames.csv").read_text(encoding="utf-8"), plan)
    T = int(meta["T"])
    n = case.n_bus
    rows = (path / "truth.csv").read_text(encoding="utf-8").strip().splitlines()[1:]
    v = np.empty((T, n))
    th = np.empty((T, n))
    for row in rows:
        k, bid, vv, tt = row.split(",")
        i = case.index_of(int(bid))
        v[int(k) - 1, i] = float(vv)
        th[int(k) - 1, i] = float(tt)
    truth = [StateVector(v[k], th[k]) for k in range(T)]
    return ScenarioTrajectory(case, plan, profile_from_dict(meta["profile"]), NoiseConfig(**meta["noise"]),
                              truth, frames, list(meta.get("pf_iterations", [])))


def make_trajectory(case: str | NetworkCase, scenario: str | ScenarioConfig, seed: int | None = None,
                    ybus: AdmittanceMatrix | None = None) -> ScenarioTrajectory:
    """Convenience wrapper: named case and scenario with the default plan."""
    case = load_case(case) if not isinstance(case, NetworkCase) else case
    cfg = load_scenario(scenario) if not isinstance(scenario, ScenarioConfig) else scenario
    if seed is not None:
        cfg = cfg.with_seed(seed)
    plan = default_plan(case, cfg.noise)
    return generate_trajectory(case, plan, cfg.profile, cfg.noise, cfg.T, ybus=ybus)
