"""Newton-Raphson AC power flow in polar coordinates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .network import AdmittanceMatrix, BusKind, NetworkCase, build_ybus
from .state import StateVector


class PowerFlowError(RuntimeError):
    pass


class SingularJacobianError(PowerFlowError):
    pass


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    state: StateVector
    iterations: int
    max_mismatch: float
    converged: bool


def compute_injections(state: StateVector, ybus: AdmittanceMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Net complex power injected at every bus, split into (P, Q) in p.u."""
    if state.n != ybus.n:
        raise ValueError(f"state has {state.n} buses, admittance matrix {ybus.n}")
    V = state.phasor
    S = V * np.conj(ybus.ybus @ V)
    return S.real, S.imag


def injection_derivatives(Y: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """dS/dtheta and dS/d|V| for the bus injections, dense (n, n) complex."""
    I = Y @ V
    Vnorm = V / np.abs(V)
    dS_dth = 1j * V[:, None] * np.conj(np.diag(I) - Y * V[None, :])
    dS_dv = V[:, None] * np.conj(Y * Vnorm[None, :])
    dS_dv[np.diag_indices_from(dS_dv)] += np.conj(I) * Vnorm
    return dS_dth, dS_dv


def injection_spec(case: NetworkCase, load_p: np.ndarray | None = None,
                   load_q: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Scheduled net injections (generation minus load) in p.u.

    ``load_p``/``load_q`` override the case loads (already in p.u.).
    """
    pd, qd = case.base_loads()
    if load_p is not None:
        pd = np.asarray(load_p, dtype=float)
    if load_q is not None:
        qd = np.asarray(load_q, dtype=float)
    pg, qg = case.generation()
    return pg - pd, qg - qd


def solve_power_flow(case: NetworkCase, ybus: AdmittanceMatrix,
                     p_spec: np.ndarray, q_spec: np.ndarray,
                     start: StateVector | None = None,
                     tol: float = 1e-8, max_iter: int = 20) -> PowerFlowSolution:
    """Solve the AC power flow with full Newton steps.

    Slack and PV magnitudes are held at their setpoints and the slack angle at
    the start value (zero for a flat start). ``iterations`` counts Newton
    updates; a start that already satisfies ``tol`` returns with zero.
    """
    n = case.n_bus
    if start is None:
        start = StateVector.flat(n)
    if np.any(start.v <= 0):
        raise ValueError("start magnitudes must be positive")
    p_spec = np.asarray(p_spec, dtype=float)
    q_spec = np.asarray(q_spec, dtype=float)

    ref = case.slack_index
    pv = case.indices_of_kind(BusKind.PV)
    pq = case.indices_of_kind(BusKind.PQ)
    pvpq = np.r_[pv, pq]
    npvpq, npq = pvpq.size, pq.size

    v = start.v.copy()
    theta = start.theta.copy()
    regulated = np.r_[ref, pv].astype(int)
    v[regulated] = case.voltage_setpoints()[regulated]
    Y = ybus.dense()

    def mismatch(V):
        S = V * np.conj(Y @ V)
        return np.r_[S.real[pvpq] - p_spec[pvpq], S.imag[pq] - q_spec[pq]]

    V = v * np.exp(1j * theta)
    F = mismatch(V)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    it = 0
    while norm > tol and it < max_iter:
        dS_dth, dS_dv = injection_derivatives(Y, V)
        J = np.block([
            [dS_dth.real[np.ix_(pvpq, pvpq)], dS_dv.real[np.ix_(pvpq, pq)]],
            [dS_dth.imag[np.ix_(pq, pvpq)], dS_dv.imag[np.ix_(pq, pq)]],
        ])
        try:
            lu = sla.lu_factor(J, check_finite=True)
        except (ValueError, sla.LinAlgError) as exc:
            raise SingularJacobianError(f"power-flow Jacobian unusable at iteration {it}: {exc}") from exc
        if np.min(np.abs(np.diag(lu[0]))) < 1e-14 * np.max(np.abs(np.diag(lu[0]))):
            raise SingularJacobianError(f"singular power-flow Jacobian at iteration {it}")
        dx = -sla.lu_solve(lu, F)
        theta[pvpq] += dx[:npvpq]
        v[pq] += dx[npvpq:npvpq + npq]
        V = v * np.exp(1j * theta)
        it += 1
        F = mismatch(V)
        norm = float(np.max(np.abs(F)))
        if not np.isfinite(norm):
            break
    converged = bool(np.isfinite(norm) and norm <= tol)
    return PowerFlowSolution(StateVector(v, theta), it, norm, converged)


def run_base_case(case: NetworkCase, ybus: AdmittanceMatrix | None = None,
                  tol: float = 1e-8, max_iter: int = 20) -> PowerFlowSolution:
    ybus = ybus if ybus is not None else build_ybus(case)
    p, q = injection_spec(case)
    return solve_power_flow(case, ybus, p, q, tol=tol, max_iter=max_iter)
