"""Quasi-steady-state estimation of power-system voltage phasors.

Network models, AC power flow, measurement simulation and four estimators
(WLS, forecasting-aided EKF, particle filter, echo state network) with a
seeded benchmark harness.
"""

from .network import NetworkCase, build_ybus, load_case
from .powerflow import solve_power_flow
from .state import StateVector

__version__ = "0.1.0"
__all__ = ["NetworkCase", "build_ybus", "load_case", "solve_power_flow", "StateVector"]
