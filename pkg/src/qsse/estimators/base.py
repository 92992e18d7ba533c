from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..scenario import WARMUP, ScenarioTrajectory
from ..state import StateVector


@dataclass(eq=False)
class EstimatorRun:
    """Estimates over the evaluation window plus timing and event log.

    ``v`` and ``theta`` are (steps, n) arrays in case bus order; ``ks`` holds the
    1-based step index of each row.
    """

    method: str
    ks: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    per_step_seconds: np.ndarray
    total_seconds: float = 0.0
    events: list[str] = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.per_step_seconds < 0):
            raise ValueError("negative timing")

    @property
    def states(self) -> list[StateVector]:
        return [StateVector(v, t) for v, t in zip(self.v, self.theta)]


def eval_steps(traj: ScenarioTrajectory, warmup: int = WARMUP) -> range:
    """1-based steps of the evaluation window (k = warmup+1 .. T)."""
    return range(warmup + 1, traj.T + 1)


class Recorder:
    """Collects per-step estimates and timings inside a run loop."""

    def __init__(self, method: str, n: int, ks):
        self.method = method
        self.ks = np.array(list(ks), dtype=int)
        self.v = np.zeros((self.ks.size, n))
        self.theta = np.zeros((self.ks.size, n))
        self.seconds = np.zeros(self.ks.size)
        self.events: list[str] = []
        self._row = {k: i for i, k in enumerate(self.ks)}
        self._t0 = time.perf_counter()

    def wants(self, k: int) -> bool:
        return k in self._row

    def put(self, k: int, state: StateVector, seconds: float) -> None:
        i = self._row[k]
        self.v[i] = state.v
        self.theta[i] = state.theta
        self.seconds[i] = seconds

    def event(self, k: int, message: str) -> None:
        self.events.append(f"k={k}: {message}")

    def finish(self, **diagnostics) -> EstimatorRun:
        total = time.perf_counter() - self._t0
        return EstimatorRun(self.method, self.ks, self.v, self.theta, self.seconds, total,
                            self.events, diagnostics)
