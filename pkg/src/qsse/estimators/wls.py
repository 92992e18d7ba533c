"""Snapshot weighted least squares solved by Gauss-Newton."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ..measurements import MeasurementFrame, MeasurementModel, MeasurementPlan, model_for
from ..network import AdmittanceMatrix
from ..scenario import ScenarioTrajectory
from ..state import StateVector
from .base import EstimatorRun, Recorder, eval_steps


class ObservabilityError(np.linalg.LinAlgError):
    """Gain matrix singular or too ill-conditioned to factor."""


@dataclass(frozen=True)
class WlsConfig:
    tol: float = 1e-6
    max_iter: int = 20
    r_diag: np.ndarray | None = None  # None: channel sigmas squared

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.r_diag is not None and np.any(np.asarray(self.r_diag) <= 0):
            raise ValueError("r_diag must be positive")

    def weights(self, plan: MeasurementPlan) -> np.ndarray:
        return np.asarray(self.r_diag if self.r_diag is not None else plan.r_diag, dtype=float)


@dataclass(frozen=True, eq=False)
class WlsResult:
    state: StateVector
    iterations: int
    objective: float
    converged: bool
    monotone: bool = True


def wls_objective(state: StateVector, frame: MeasurementFrame, plan: MeasurementPlan,
                  r_diag: np.ndarray, ybus: AdmittanceMatrix | None = None,
                  h: np.ndarray | None = None) -> float:
    """J = r' R^-1 r with r = z - h(state).

    Pass either ``ybus`` (h is evaluated) or a precomputed ``h``.
    """
    if h is None:
        if ybus is None:
            raise TypeError("need ybus or h")
        h = model_for(plan, ybus).h(state)
    r = frame.z - h
    return float(np.sum(r * r / np.asarray(r_diag)))


def solve_gain(H: np.ndarray, w: np.ndarray, r: np.ndarray, rcond: float = 1e-13) -> np.ndarray:
    """Solve (H' W H) dx = H' W r by Cholesky; ``w`` is the diagonal of W = R^-1.

    ``H`` may be dense or scipy-sparse; the gain is factored densely either way.
    """
    if H.shape[0] < H.shape[1]:
        raise ObservabilityError(f"{H.shape[0]} measurements cannot observe {H.shape[1]} states")
    if sp.issparse(H):
        G = (H.T @ H.multiply(w[:, None]).tocsr()).toarray()
        rhs = H.T @ (w * r)
    else:
        Hw = H * w[:, None]
        G = H.T @ Hw
        rhs = Hw.T @ r
    try:
        c, low = sla.cho_factor(G, lower=True, check_finite=True)
    except (sla.LinAlgError, ValueError) as exc:
        raise ObservabilityError(f"gain matrix not positive definite: {exc}") from exc
    d = np.diag(c)
    if (d.min() / d.max()) ** 2 < rcond:
        raise ObservabilityError("gain matrix numerically singular")
    return sla.cho_solve((c, low), rhs)


def wls_step(state: StateVector, frame: MeasurementFrame, plan: MeasurementPlan,
             ybus: AdmittanceMatrix, r_diag: np.ndarray) -> np.ndarray:
    """One Gauss-Newton increment in packed coordinates."""
    mm = model_for(plan, ybus)
    r = frame.z - mm.h(state)
    return solve_gain(mm.jacobian(state), 1.0 / np.asarray(r_diag), r)


def gauss_newton(mm: MeasurementModel, z: np.ndarray, w: np.ndarray, x0: np.ndarray,
                 tol: float, max_iter: int) -> tuple[np.ndarray, int, float, bool, bool]:
    x = x0.copy()
    r = z - mm.h_x(x)
    J = float(r @ (w * r))
    monotone = True
    it = 0
    converged = False
    while it < max_iter:
        H = mm.jacobian_fast_x(x)
        dx = solve_gain(H, w, r)
        x += dx
        it += 1
        r = z - mm.h_x(x)
        J_new = float(r @ (w * r))
        if J_new > J * (1 + 1e-12) + 1e-14:
            monotone = False
        J = J_new
        if np.max(np.abs(dx)) <= tol:
            converged = True
            break
    return x, it, J, converged, monotone


class FixedGainWls:
    """Gauss-Newton with Jacobian and gain frozen at one linearization point.

    The gain is factored once; each refinement then costs one evaluation of
    h and two triangular solves. Repeated refinement converges to the root of
    H0' W (z - h(x)), which is the WLS optimum only when ``x_lin`` is; near the
    operating point the two differ by second-order terms.
    """

    def __init__(self, mm: MeasurementModel, w: np.ndarray, x_lin: np.ndarray, rcond: float = 1e-13):
        self.mm = mm
        self.w = np.asarray(w, dtype=float)
        H = mm.jacobian_fast_x(np.asarray(x_lin, dtype=float))
        self.H = H
        G = (H.T @ H.multiply(self.w[:, None]).tocsr()).toarray() if sp.issparse(H) else H.T @ (H * self.w[:, None])
        try:
            self.factor = sla.cho_factor(G, lower=True)
        except (sla.LinAlgError, ValueError) as exc:
            raise ObservabilityError(f"gain matrix not positive definite: {exc}") from exc
        d = np.diag(self.factor[0])
        if (d.min() / d.max()) ** 2 < rcond:
            raise ObservabilityError("gain matrix numerically singular")

    def refine(self, z: np.ndarray, x0: np.ndarray, iterations: int = 1) -> np.ndarray:
        x = np.array(x0, dtype=float)
        for _ in range(iterations):
            r = z - self.mm.h_x(x)
            x += sla.cho_solve(self.factor, self.H.T @ (self.w * r))
        return x


def wls_estimate(frame: MeasurementFrame, plan: MeasurementPlan, ybus: AdmittanceMatrix,
                 config: WlsConfig = WlsConfig(), init: StateVector | None = None) -> WlsResult:
    """Iterate Gauss-Newton from ``init`` (flat start by default) until the step is below ``tol``."""
    mm = model_for(plan, ybus)
    init = init or StateVector.flat(plan.n)
    if np.any(init.v <= 0):
        raise ValueError("initial magnitudes must be positive")
    w = 1.0 / config.weights(plan)
    x, it, J, conv, mono = gauss_newton(mm, frame.z, w, init.pack(plan.slack), config.tol, config.max_iter)
    return WlsResult(StateVector.unpack(x, plan.slack), it, J, conv, mono)


def wls_gradient(state: StateVector, frame: MeasurementFrame, plan: MeasurementPlan,
                 ybus: AdmittanceMatrix, r_diag: np.ndarray) -> np.ndarray:
    """H' R^-1 (z - h), which vanishes at a stationary point of J."""
    mm = model_for(plan, ybus)
    r = frame.z - mm.h(state)
    return mm.jacobian(state).T @ (r / np.asarray(r_diag))


def wls_run(traj: ScenarioTrajectory, plan: MeasurementPlan, ybus: AdmittanceMatrix,
            config: WlsConfig = WlsConfig(), ks=None) -> EstimatorRun:
    """Independent flat-start estimate at every evaluation step."""
    rec = Recorder("wls", plan.n, ks if ks is not None else eval_steps(traj))
    iters = []
    for k in rec.ks:
        t0 = time.perf_counter()
        res = wls_estimate(traj.frames[k - 1], plan, ybus, config)
        rec.put(k, res.state, time.perf_counter() - t0)
        iters.append(res.iterations)
        if not res.converged:
            rec.event(k, f"no convergence in {res.iterations} iterations")
        if not res.monotone:
            rec.event(k, "objective increased during Gauss-Newton")
    return rec.finish(iterations=iters)
