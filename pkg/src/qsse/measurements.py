"""Measurement function h(x), its Jacobian, placement plans and noise.

The estimation state is ``x = [theta (slack removed), v]`` with length 2n-1,
see :meth:`qsse.state.StateVector.pack`.
"""

from __future__ import annotations

import functools
import io
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .network import AdmittanceMatrix, NetworkCase
from .powerflow import injection_derivatives
from .state import StateVector


class Kind(str, Enum):
    V_MAG = "v_mag"
    P_INJ = "p_injection"
    Q_INJ = "q_injection"
    P_FLOW = "p_flow"
    Q_FLOW = "q_flow"

    @property
    def is_flow(self) -> bool:
        return self in (Kind.P_FLOW, Kind.Q_FLOW)

    @property
    def is_power(self) -> bool:
        return self is not Kind.V_MAG


@dataclass(frozen=True)
class MeasurementChannel:
    """One metered quantity.

    ``location`` is a bus id for bus channels and ``(branch_number, end)`` for
    flows, where ``branch_number`` is the 1-based row of the branch in the case
    file and ``end`` is ``"from"`` or ``"to"``.
    """

    kind: Kind
    location: int | tuple[int, str]
    sigma: float

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if not self.sigma > 0:
            raise ValueError(f"channel sigma must be positive, got {self.sigma}")
        if self.kind.is_flow:
            if not (isinstance(self.location, tuple) and self.location[1] in ("from", "to")):
                raise ValueError(f"flow channel needs (branch, 'from'|'to'), got {self.location!r}")
        elif not isinstance(self.location, (int, np.integer)):
            raise ValueError(f"bus channel needs an integer bus id, got {self.location!r}")

    @property
    def label(self) -> str:
        if self.kind.is_flow:
            return f"{self.kind.value}@{self.location[0]}:{self.location[1]}"
        return f"{self.kind.value}@{self.location}"


@dataclass(frozen=True, eq=False)
class MeasurementPlan:
    """Ordered channel list bound to one network (bus ids and slack position)."""

    channels: tuple[MeasurementChannel, ...]
    bus_ids: tuple[int, ...]
    slack: int
    n_branch: int

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        ids = set(self.bus_ids)
        for ch in self.channels:
            if ch.kind.is_flow:
                if not 1 <= ch.location[0] <= self.n_branch:
                    raise ValueError(f"{ch.label}: no such branch")
            elif ch.location not in ids:
                raise ValueError(f"{ch.label}: no such bus")

    @property
    def m(self) -> int:
        return len(self.channels)

    @property
    def n(self) -> int:
        return len(self.bus_ids)

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([c.sigma for c in self.channels])

    @property
    def r_diag(self) -> np.ndarray:
        """Diagonal of the measurement covariance implied by channel sigmas."""
        return self.sigmas ** 2

    @property
    def kinds(self) -> np.ndarray:
        return np.array([c.kind.value for c in self.channels])


@dataclass(frozen=True)
class NoiseConfig:
    """Additive Gaussian noise on the measurements.

    ``mode='absolute'`` uses the sigmas directly in p.u.; ``'relative'`` scales
    them by the magnitude of the clean reading (with a floor of ``rel_floor``).
    """

    sigma_v: float = 0.01
    sigma_power: float = 0.02
    seed: int = 0
    mode: str = "absolute"
    rel_floor: float = 1e-3

    def __post_init__(self):
        for s in (self.sigma_v, self.sigma_power):
            if not 0 < s <= 0.1:
                raise ValueError(f"noise sigma must lie in (0, 0.1], got {s}")
        if self.mode not in ("absolute", "relative"):
            raise ValueError(f"unknown noise mode {self.mode!r}")

    def sigma_for(self, kind: Kind) -> float:
        return self.sigma_v if kind is Kind.V_MAG else self.sigma_power


@dataclass(frozen=True, eq=False)
class MeasurementFrame:
    k: int
    z: np.ndarray
    plan: MeasurementPlan

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if z.shape != (self.plan.m,):
            raise ValueError(f"frame length {z.shape} does not match plan ({self.plan.m})")
        if not np.all(np.isfinite(z)):
            raise ValueError(f"non-finite measurement in frame {self.k}")
        object.__setattr__(self, "z", z)


def default_plan(case: NetworkCase, noise: NoiseConfig | None = None) -> MeasurementPlan:
    """|V|, P and Q injection at every bus and P/Q flow at every in-service branch from-end."""
    noise = noise or NoiseConfig()
    chans: list[MeasurementChannel] = []
    for kind in (Kind.V_MAG, Kind.P_INJ, Kind.Q_INJ):
        chans += [MeasurementChannel(kind, b.id, noise.sigma_for(kind)) for b in case.buses]
    live = [k for k, br in enumerate(case.branches, start=1) if br.in_service]
    for kind in (Kind.P_FLOW, Kind.Q_FLOW):
        chans += [MeasurementChannel(kind, (k, "from"), noise.sigma_for(kind)) for k in live]
    return make_plan(case, chans)


def make_plan(case: NetworkCase, channels) -> MeasurementPlan:
    for ch in channels:
        if ch.kind.is_flow and not case.branches[ch.location[0] - 1].in_service:
            raise ValueError(f"{ch.label}: branch is out of service")
    return MeasurementPlan(tuple(channels), tuple(int(i) for i in case.bus_ids), case.slack_index, case.n_branch)


# --------------------------------------------------------------------------
# plan and frame text formats


def format_plan(plan: MeasurementPlan) -> str:
    lines = ["# kind location sigma"]
    for ch in plan.channels:
        loc = f"{ch.location[0]}:{ch.location[1]}" if ch.kind.is_flow else str(ch.location)
        lines.append(f"{ch.kind.value} {loc} {ch.sigma!r}")
    return "\n".join(lines) + "\n"


def parse_plan(text: str, case: NetworkCase) -> MeasurementPlan:
    chans = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"plan line {lineno}: expected 'kind location sigma'")
        kind = Kind(parts[0])
        if kind.is_flow:
            br, end = parts[1].split(":")
            loc: int | tuple[int, str] = (int(br), end)
        else:
            loc = int(parts[1])
        chans.append(MeasurementChannel(kind, loc, float(parts[2])))
    return make_plan(case, chans)


def frames_to_csv(frames: list[MeasurementFrame]) -> str:
    if not frames:
        return ""
    plan = frames[0].plan
    buf = io.StringIO()
    buf.write("k," + ",".join(c.label for c in plan.channels) + "\n")
    for fr in frames:
        buf.write(f"{fr.k}," + ",".join(repr(float(v)) for v in fr.z) + "\n")
    return buf.getvalue()


def frames_from_csv(text: str, plan: MeasurementPlan) -> list[MeasurementFrame]:
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    if header[1:] != [c.label for c in plan.channels]:
        raise ValueError("frame CSV columns do not match the measurement plan")
    frames = []
    for line in lines[1:]:
        vals = line.split(",")
        frames.append(MeasurementFrame(int(vals[0]), np.array([float(v) for v in vals[1:]]), plan))
    return frames


# --------------------------------------------------------------------------
# evaluation


SPARSE_THRESHOLD = 100


class MeasurementModel:
    """Compiled h(x) and H(x) for one (plan, admittance matrix) pair."""

    def __init__(self, plan: MeasurementPlan, ybus: AdmittanceMatrix):
        if ybus.n != plan.n:
            raise ValueError(f"plan covers {plan.n} buses, admittance matrix {ybus.n}")
        self.plan = plan
        self.n = plan.n
        self.slack = plan.slack
        self.Y = ybus.dense()
        self.Ysp = ybus.ybus
        pos = {bid: i for i, bid in enumerate(plan.bus_ids)}
        kinds = [c.kind for c in plan.channels]

        def rows(kind):
            return np.array([i for i, k in enumerate(kinds) if k is kind], dtype=int)

        def buses(kind):
            return np.array([pos[c.location] for c in plan.channels if c.kind is kind], dtype=int)

        self.r_v, self.b_v = rows(Kind.V_MAG), buses(Kind.V_MAG)
        self.r_p, self.b_p = rows(Kind.P_INJ), buses(Kind.P_INJ)
        self.r_q, self.b_q = rows(Kind.Q_INJ), buses(Kind.Q_INJ)

        # one combined row block for all flow channels; P and Q channels on
        # the same end share a row
        flow_key = []
        for c in plan.channels:
            if c.kind.is_flow:
                key = (c.location[0], c.location[1])
                if key not in flow_key:
                    flow_key.append(key)
        self.r_pf = rows(Kind.P_FLOW)
        self.r_qf = rows(Kind.Q_FLOW)
        self.f_pf = np.array([flow_key.index(tuple(c.location)) for c in plan.channels if c.kind is Kind.P_FLOW], dtype=int)
        self.f_qf = np.array([flow_key.index(tuple(c.location)) for c in plan.channels if c.kind is Kind.Q_FLOW], dtype=int)
        if flow_key:
            brow = []
            ends = []
            mats = []
            for br, end in flow_key:
                row = ybus.branch_rows[br - 1]
                if row < 0:
                    raise ValueError(f"flow channel on out-of-service branch {br}")
                brow.append(row)
                if end == "from":
                    mats.append(ybus.yf[row])
                    ends.append(ybus.f_idx[row])
                else:
                    mats.append(ybus.yt[row])
                    ends.append(ybus.t_idx[row])
            self.Af_sp = sp.vstack(mats).tocsr()
            self.Af = self.Af_sp.toarray()
            self.e_f = np.array(ends, dtype=int)
        else:
            self.Af_sp = sp.csr_matrix((0, self.n), dtype=complex)
            self.Af = np.zeros((0, self.n), dtype=complex)
            self.e_f = np.zeros(0, dtype=int)
        self.m = plan.m
        self.nx = 2 * self.n - 1
        self.nonslack = np.delete(np.arange(self.n), self.slack)
        # dense assembly wins for small cases, sparse for large ones
        self.prefer_sparse = self.n >= SPARSE_THRESHOLD

    # -- single state ---------------------------------------------------

    def h(self, state: StateVector) -> np.ndarray:
        V = state.phasor
        out = np.empty(self.m)
        out[self.r_v] = state.v[self.b_v]
        if self.r_p.size or self.r_q.size:
            S = V * np.conj(self.Y @ V)
            out[self.r_p] = S.real[self.b_p]
            out[self.r_q] = S.imag[self.b_q]
        if self.e_f.size:
            Sf = V[self.e_f] * np.conj(self.Af @ V)
            out[self.r_pf] = Sf.real[self.f_pf]
            out[self.r_qf] = Sf.imag[self.f_qf]
        return out

    def jacobian(self, state: StateVector) -> np.ndarray:
        """Analytic m x (2n-1) Jacobian; columns are non-slack angles then magnitudes."""
        n = self.n
        V = state.phasor
        H = np.zeros((self.m, 2 * n))
        H[self.r_v, n + self.b_v] = 1.0
        if self.r_p.size or self.r_q.size:
            dS_dth, dS_dv = injection_derivatives(self.Y, V)
            H[self.r_p, :n] = dS_dth.real[self.b_p]
            H[self.r_p, n:] = dS_dv.real[self.b_p]
            H[self.r_q, :n] = dS_dth.imag[self.b_q]
            H[self.r_q, n:] = dS_dv.imag[self.b_q]
        if self.e_f.size:
            A = self.Af
            e = self.e_f
            rows = np.arange(e.size)
            If = A @ V
            Ve = V[e]
            Vnorm = V / np.abs(V)
            dSf_dth = -1j * Ve[:, None] * np.conj(A * V[None, :])
            dSf_dth[rows, e] += 1j * np.conj(If) * Ve
            dSf_dv = Ve[:, None] * np.conj(A * Vnorm[None, :])
            dSf_dv[rows, e] += np.conj(If) * Vnorm[e]
            H[self.r_pf, :n] = dSf_dth.real[self.f_pf]
            H[self.r_pf, n:] = dSf_dv.real[self.f_pf]
            H[self.r_qf, :n] = dSf_dth.imag[self.f_qf]
            H[self.r_qf, n:] = dSf_dv.imag[self.f_qf]
        return np.delete(H, self.slack, axis=1)

    def jacobian_sparse(self, state: StateVector) -> sp.csr_matrix:
        """Same as :meth:`jacobian` assembled in sparse form (large networks)."""
        n = self.n
        V = state.phasor
        Vnorm = V / np.abs(V)
        dV = sp.diags(V)
        dVn = sp.diags(Vnorm)
        parts = []  # (rows, d/dtheta block, d/dv block)
        if self.r_v.size:
            sel = sp.csr_matrix((np.ones(self.r_v.size), (np.arange(self.r_v.size), self.b_v)), shape=(self.r_v.size, n))
            parts.append((self.r_v, sp.csr_matrix((self.r_v.size, n)), sel))
        if self.r_p.size or self.r_q.size:
            I = self.Ysp @ V
            dS_dth = (1j * dV @ (sp.diags(I) - self.Ysp @ dV).conj()).tocsr()
            dS_dv = (dV @ (self.Ysp @ dVn).conj() + sp.diags(np.conj(I) * Vnorm)).tocsr()
            if self.r_p.size:
                parts.append((self.r_p, dS_dth[self.b_p].real, dS_dv[self.b_p].real))
            if self.r_q.size:
                parts.append((self.r_q, dS_dth[self.b_q].imag, dS_dv[self.b_q].imag))
        if self.e_f.size:
            nf = self.e_f.size
            If = self.Af_sp @ V
            Ce = sp.csr_matrix((np.ones(nf), (np.arange(nf), self.e_f)), shape=(nf, n))
            dVe = sp.diags(V[self.e_f])
            dSf_dth = (1j * (sp.diags(np.conj(If)) @ Ce @ dV - dVe @ (self.Af_sp @ dV).conj())).tocsr()
            dSf_dv = (dVe @ (self.Af_sp @ dVn).conj() + sp.diags(np.conj(If)) @ Ce @ dVn).tocsr()
            if self.r_pf.size:
                parts.append((self.r_pf, dSf_dth[self.f_pf].real, dSf_dv[self.f_pf].real))
            if self.r_qf.size:
                parts.append((self.r_qf, dSf_dth[self.f_qf].imag, dSf_dv[self.f_qf].imag))
        order = np.concatenate([p[0] for p in parts])
        th = sp.vstack([p[1] for p in parts])
        vv = sp.vstack([p[2] for p in parts])
        keep = np.delete(np.arange(n), self.slack)
        H = sp.hstack([th.tocsc()[:, keep], vv]).tocsr()
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        return H[inv]

    # -- batches (rows are states) --------------------------------------

    def h_batch(self, v: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """h for N states at once; ``v``/``theta`` are (N, n), result (N, m)."""
        V = v * np.exp(1j * theta)
        out = np.empty((V.shape[0], self.m))
        out[:, self.r_v] = v[:, self.b_v]
        if self.r_p.size or self.r_q.size:
            S = V * np.conj((self.Ysp @ V.T).T)
            out[:, self.r_p] = S.real[:, self.b_p]
            out[:, self.r_q] = S.imag[:, self.b_q]
        if self.e_f.size:
            Sf = V[:, self.e_f] * np.conj((self.Af_sp @ V.T).T)
            out[:, self.r_pf] = Sf.real[:, self.f_pf]
            out[:, self.r_qf] = Sf.imag[:, self.f_qf]
        return out

    def h_x(self, x: np.ndarray) -> np.ndarray:
        return self.h(StateVector.unpack(x, self.slack))

    def jacobian_x(self, x: np.ndarray) -> np.ndarray:
        return self.jacobian(StateVector.unpack(x, self.slack))

    def jacobian_fast_x(self, x: np.ndarray):
        """Dense or sparse Jacobian, whichever is cheaper for this network size."""
        state = StateVector.unpack(x, self.slack)
        return self.jacobian_sparse(state) if self.prefer_sparse else self.jacobian(state)


@functools.lru_cache(maxsize=16)
def model_for(plan: MeasurementPlan, ybus: AdmittanceMatrix) -> MeasurementModel:
    return MeasurementModel(plan, ybus)


def evaluate_h(state: StateVector, plan: MeasurementPlan, ybus: AdmittanceMatrix) -> np.ndarray:
    return model_for(plan, ybus).h(state)


def jacobian_h(state: StateVector, plan: MeasurementPlan, ybus: AdmittanceMatrix) -> np.ndarray:
    return model_for(plan, ybus).jacobian(state)


def frame_rng(seed: int, k: int) -> np.random.Generator:
    """Generator that depends only on (seed, k)."""
    return np.random.default_rng([int(seed), int(k)])


def channel_sigmas(clean: np.ndarray, plan: MeasurementPlan, noise: NoiseConfig) -> np.ndarray:
    sig = np.array([noise.sigma_for(c.kind) for c in plan.channels])
    if noise.mode == "relative":
        sig = sig * np.maximum(np.abs(clean), noise.rel_floor)
    return sig


def add_noise(clean: np.ndarray, plan: MeasurementPlan, noise: NoiseConfig, k: int) -> MeasurementFrame:
    clean = np.asarray(clean, dtype=float)
    eps = frame_rng(noise.seed, k).standard_normal(clean.size) * channel_sigmas(clean, plan, noise)
    return MeasurementFrame(k, clean + eps, plan)
