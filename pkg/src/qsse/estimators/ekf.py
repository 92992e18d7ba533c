"""Forecasting-aided extended Kalman filter.

The transition comes from Holt's linear exponential smoothing applied to the
state itself: x-(k+1) = F x(k) + g(k) with F a scaled identity.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg as sla

from ..measurements import MeasurementFrame, MeasurementPlan, model_for
from ..network import AdmittanceMatrix
from ..scenario import ScenarioTrajectory
from ..state import StateVector
from .base import EstimatorRun, Recorder, eval_steps


class InnovationError(np.linalg.LinAlgError):
    """Innovation covariance S = H P- H' + R could not be factored."""


@dataclass(frozen=True)
class HoltState:
    a: np.ndarray
    b: np.ndarray
    alpha: float = 0.8
    beta: float = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if np.shape(self.a) != np.shape(self.b):
            raise ValueError("level and trend must have the same shape")

    @classmethod
    def start(cls, x0: np.ndarray, alpha: float = 0.8, beta: float = 0.5) -> "HoltState":
        """Level at ``x0`` and zero trend."""
        x0 = np.asarray(x0, dtype=float)
        return cls(x0.copy(), np.zeros_like(x0), alpha, beta)


def holt_coefficients(holt: HoltState, x_pred_prev: np.ndarray,
                      x_prev: np.ndarray) -> tuple[float, np.ndarray, HoltState]:
    """Linear transition from the latest prediction and posterior.

    ``x_pred_prev`` is the prediction that was made for the current step and
    ``x_prev`` the posterior just computed for it. Returns the scalar factor
    ``F`` (the transition is ``F * I``), the offset ``g`` and the advanced
    smoother, so that ``F * x_prev + g`` equals the new level plus trend.
    """
    x_pred_prev = np.asarray(x_pred_prev, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    if x_pred_prev.shape != holt.a.shape or x_prev.shape != holt.a.shape:
        raise ValueError("state dimensions do not match the smoother")
    al, be = holt.alpha, holt.beta
    F = al * (1.0 + be)
    g = (1.0 + be) * (1.0 - al) * x_pred_prev - be * holt.a + (1.0 - be) * holt.b
    a = al * x_prev + (1.0 - al) * x_pred_prev
    b = be * (a - holt.a) + (1.0 - be) * holt.b
    return F, g, HoltState(a, b, al, be)


@dataclass(frozen=True, eq=False)
class EkfState:
    """Posterior mean (packed), covariance, smoother and the noise diagonals."""

    x: np.ndarray
    P: np.ndarray
    holt: HoltState
    Q: np.ndarray
    R: np.ndarray
    F: float = 1.0
    g: np.ndarray | None = None

    def __post_init__(self):
        nx = self.x.size
        if self.P.shape != (nx, nx):
            raise ValueError("covariance shape does not match the state")
        if self.Q.shape != (nx,):
            raise ValueError("Q must be a diagonal of the state size")

    def as_state(self, slack: int) -> StateVector:
        return StateVector.unpack(self.x, slack)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def ekf_predict(state: EkfState) -> tuple[np.ndarray, np.ndarray]:
    """x- = F x + g and P- = F^2 P + Q for the scalar transition factor F."""
    g = state.g if state.g is not None else np.zeros_like(state.x)
    f = state.F
    x_minus = f * state.x + g
    P_minus = (f * f) * state.P
    P_minus[np.diag_indices_from(P_minus)] += state.Q
    return x_minus, P_minus


def kalman_gain(P_minus: np.ndarray, H: np.ndarray, R: np.ndarray) -> np.ndarray:
    """K = P- H' S^-1 with S factored by Cholesky."""
    PHt = P_minus @ H.T
    S = H @ PHt
    S[np.diag_indices_from(S)] += R
    try:
        c = sla.cho_factor(S, lower=True, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise InnovationError(f"innovation covariance not positive definite: {exc}") from exc
    d = np.diag(c[0])
    if (d.min() / d.max()) ** 2 < 1e-15:
        raise InnovationError("innovation covariance numerically singular")
    return sla.cho_solve(c, PHt.T).T


def ekf_update(x_minus: np.ndarray, P_minus: np.ndarray, frame: MeasurementFrame,
               plan: MeasurementPlan, ybus: AdmittanceMatrix,
               R: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Assimilate one frame; returns the posterior (x, P) with P re-symmetrized."""
    mm = model_for(plan, ybus)
    R = np.broadcast_to(np.asarray(R, dtype=float), (plan.m,))
    H = mm.jacobian_x(x_minus)
    K = kalman_gain(P_minus, H, R)
    x = x_minus + K @ (frame.z - mm.h_x(x_minus))
    P = P_minus - K @ (H @ P_minus)
    return x, symmetrize(P)


@dataclass(frozen=True)
class EkfConfig:
    alpha: float = 0.8
    beta: float = 0.5
    p0: float = 1e-6
    q: float = 1e-6
    r: float | None = None  # None: channel sigmas squared
    check_psd: bool = False

    def __post_init__(self):
        if not (self.p0 > 0 and self.q >= 0):
            raise ValueError("p0 must be positive and q non-negative")
        if self.r is not None and not self.r > 0:
            raise ValueError("r must be positive")
        HoltState(np.zeros(1), np.zeros(1), self.alpha, self.beta)

    def r_diag(self, plan: MeasurementPlan) -> np.ndarray:
        return plan.r_diag if self.r is None else np.full(plan.m, float(self.r))

    @classmethod
    def from_dict(cls, d: dict) -> "EkfConfig":
        return cls(**d)


def ekf_init(plan: MeasurementPlan, config: EkfConfig, x0: np.ndarray | None = None) -> EkfState:
    nx = 2 * plan.n - 1
    x0 = StateVector.flat(plan.n).pack(plan.slack) if x0 is None else np.asarray(x0, dtype=float)
    return EkfState(x0.copy(), config.p0 * np.eye(nx), HoltState.start(x0, config.alpha, config.beta),
                    np.full(nx, config.q), config.r_diag(plan))


def ekf_step(state: EkfState, frame: MeasurementFrame, plan: MeasurementPlan,
             ybus: AdmittanceMatrix) -> EkfState:
    """Predict, update, then advance the smoother to build the next transition."""
    x_minus, P_minus = ekf_predict(state)
    x, P = ekf_update(x_minus, P_minus, frame, plan, ybus, state.R)
    F, g, holt = holt_coefficients(state.holt, x_minus, x)
    return replace(state, x=x, P=P, holt=holt, F=F, g=g)


def min_eigenvalue(P: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(P)[0])


def ekf_run(traj: ScenarioTrajectory, plan: MeasurementPlan, ybus: AdmittanceMatrix,
            config: EkfConfig = EkfConfig(), ks=None) -> EstimatorRun:
    """Filter every step from a flat start; report the evaluation window.

    The first prediction is persistence (no smoother history yet).
    """
    rec = Recorder("ekf", plan.n, ks if ks is not None else eval_steps(traj))
    state = ekf_init(plan, config)
    traces, min_eigs = [], []
    for k in range(1, traj.T + 1):
        t0 = time.perf_counter()
        try:
            state = ekf_step(state, traj.frames[k - 1], plan, ybus)
        except InnovationError as exc:
            rec.event(k, str(exc))
            raise
        dt = time.perf_counter() - t0
        if config.check_psd:
            min_eigs.append(min_eigenvalue(state.P))
        traces.append(float(np.trace(state.P)))
        if rec.wants(k):
            rec.put(k, state.as_state(plan.slack), dt)
    return rec.finish(trace_P=traces, min_eig=min_eigs)
