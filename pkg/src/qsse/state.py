"""Voltage-phasor state and its packing into the estimation vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class StateVector:
    """Per-bus voltage magnitude (p.u.) and angle (rad), in case bus order."""

    v: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.v, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if v.shape != theta.shape or v.ndim != 1:
            raise ValueError(f"magnitude/angle shape mismatch: {v.shape} vs {theta.shape}")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def flat(cls, n: int) -> "StateVector":
        return cls(np.ones(n), np.zeros(n))

    @property
    def n(self) -> int:
        return self.v.size

    @property
    def phasor(self) -> np.ndarray:
        return self.v * np.exp(1j * self.theta)

    def pack(self, slack: int) -> np.ndarray:
        """Estimation vector ``[theta without slack, v]`` of length 2n-1."""
        return np.concatenate([np.delete(self.theta, slack), self.v])

    @classmethod
    def unpack(cls, x: np.ndarray, slack: int, slack_angle: float = 0.0) -> "StateVector":
        x = np.asarray(x, dtype=float)
        n = (x.size + 1) // 2
        theta = np.insert(x[: n - 1], slack, slack_angle)
        return cls(x[n - 1:].copy(), theta)

    def copy(self) -> "StateVector":
        return StateVector(self.v.copy(), self.theta.copy())

    def allclose(self, other: "StateVector", atol: float) -> bool:
        return bool(np.all(np.abs(self.v - other.v) <= atol) and np.all(np.abs(self.theta - other.theta) <= atol))


def unpack_batch(x: np.ndarray, slack: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``unpack`` for an (N, 2n-1) array; returns (v, theta) as (N, n)."""
    n = (x.shape[1] + 1) // 2
    theta = np.insert(x[:, : n - 1], slack, 0.0, axis=1)
    return x[:, n - 1:], theta
