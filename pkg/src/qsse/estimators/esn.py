"""Echo state network estimator with an online ridge + LMS readout.

Two independent networks map the measurement vector to bus voltage
magnitudes and to bus voltage angles. Each is a leaky tanh reservoir with a
linear readout on the augmented signal ``s = [1, z, h]``.
"""

from __future__ import annotations

import functools
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from ..measurements import MeasurementPlan, model_for
from ..network import AdmittanceMatrix
from ..scenario import WARMUP, ScenarioTrajectory
from ..state import StateVector
from .base import EstimatorRun, Recorder, eval_steps
from .wls import FixedGainWls, ObservabilityError, gauss_newton

ACTIVATIONS = {
    "tanh": np.tanh,
    "sigmoid": lambda x: 0.5 * (1.0 + np.tanh(0.5 * x)),
}


@dataclass(frozen=True)
class EsnConfig:
    reservoir_size: int = 400
    spectral_radius: float = 0.3
    leak: float = 1.63e-2
    ridge_epsilon: float = 1e-9
    lms_eta: float = 0.9e-2
    input_scale: float = 1e-5
    bias_scale: float = 0.75e3
    output_scale: float = 1e-5
    density: float = 0.1
    activation: str = "tanh"
    seed: int = 0
    scale_readout_input: bool = False

    def __post_init__(self):
        if self.reservoir_size < 1:
            raise ValueError("reservoir_size must be at least 1")
        if not 0 < self.spectral_radius < 1:
            raise ValueError("spectral radius must lie in (0, 1) for the echo state property")
        if not 0 < self.leak <= 1:
            raise ValueError("leak must lie in (0, 1]")
        if self.ridge_epsilon < 0 or not self.lms_eta > 0:
            raise ValueError("ridge_epsilon must be >= 0 and lms_eta > 0")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.output_scale > 0:
            raise ValueError("output_scale must be positive")

    @property
    def f1(self):
        return ACTIVATIONS[self.activation]

    def readout_input(self, z: np.ndarray) -> np.ndarray:
        """Measurement block of the augmented signal.

        With ``scale_readout_input`` the input scaling applies to the
        measurement vector itself, so the readout sees ``input_scale * z``;
        the reservoir drive ``w_in @ z`` is the same either way.
        """
        return self.input_scale * z if self.scale_readout_input else z


# Default magnitude and angle networks. The magnitude readout sees scaled measurements: with raw z
# the near-singular ridge fit chases measurement noise in the magnitudes.
MAGNITUDE_CONFIG = EsnConfig(scale_readout_input=True)
ANGLE_CONFIG = EsnConfig(reservoir_size=21, spectral_radius=0.05, leak=0.2, ridge_epsilon=1.5e-5,
                         lms_eta=0.5e-2, bias_scale=0.6e3, seed=1)


@dataclass(frozen=True, eq=False)
class EsnWeights:
    w_res: sp.csr_matrix
    w_in: np.ndarray
    w_bias: np.ndarray

    @property
    def n_h(self) -> int:
        return self.w_bias.size

    @property
    def m(self) -> int:
        return self.w_in.shape[1]


@dataclass(eq=False)
class EsnState:
    """Reservoir signal, ridge accumulators and the current readout.

    ``gram`` (sum of s s') and ``cross`` (sum of x s') are updated in place
    when present. The step history ``S``/``X`` and its kernel ``S S'`` are
    always kept, which allows the readout to be solved in kernel form while
    there are fewer samples than features; with ``gram=None`` the primal
    products are rebuilt from the history on demand.
    """

    h: np.ndarray
    gram: np.ndarray | None
    cross: np.ndarray | None
    w_out: np.ndarray
    _S: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    _X: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    _K: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    _T: int = 0

    @property
    def steps(self) -> int:
        return self._T

    @property
    def S(self) -> np.ndarray:
        """(steps, N_s) signals seen so far."""
        return self._S[:self._T]

    @property
    def X(self) -> np.ndarray:
        """(steps, n) targets seen so far."""
        return self._X[:self._T]

    @property
    def n_s(self) -> int:
        return self.w_out.shape[1]

    @property
    def kernel(self) -> np.ndarray:
        return self._K[:self.steps, :self.steps]

    def products(self) -> tuple[np.ndarray, np.ndarray]:
        """(gram, cross), from the accumulators or rebuilt from the history."""
        if self.gram is not None:
            return self.gram, self.cross
        if not self.steps:
            return np.zeros((self.n_s, self.n_s)), np.zeros_like(self.w_out)
        S, X = self.S, self.X
        return S.T @ S, X.T @ S


def spectral_radius(w: np.ndarray | sp.spmatrix) -> float:
    dense = w.toarray() if sp.issparse(w) else np.asarray(w)
    return float(np.max(np.abs(np.linalg.eigvals(dense))))


def esn_init(config: EsnConfig, m: int, n: int) -> tuple[EsnWeights, EsnState]:
    """Draw the fixed reservoir and zero the trainable parts."""
    rng = np.random.default_rng([config.seed, config.reservoir_size, m])
    N = config.reservoir_size
    for _ in range(100):
        mask = rng.random((N, N)) < config.density
        w = np.where(mask, rng.standard_normal((N, N)), 0.0)
        rho = spectral_radius(w)
        if rho > 1e-12:
            break
    else:
        raise RuntimeError("could not draw a reservoir with nonzero spectral radius")
    w_res = sp.csr_matrix(w * (config.spectral_radius / rho))
    w_in = config.input_scale * rng.uniform(-1.0, 1.0, (N, m))
    w_bias = config.bias_scale * rng.uniform(-1.0, 1.0, N)
    return EsnWeights(w_res, w_in, w_bias), fresh_state(config, m, n)


@functools.lru_cache(maxsize=8)
def cached_init(config: EsnConfig, m: int, n: int) -> EsnWeights:
    return esn_init(config, m, n)[0]


def fresh_state(config: EsnConfig, m: int, n: int, accumulate: bool = True) -> EsnState:
    """Zeroed reservoir and readout; ``accumulate=False`` skips the N_s x N_s gram."""
    ns = 1 + m + config.reservoir_size
    gram = np.zeros((ns, ns)) if accumulate else None
    cross = np.zeros((n, ns)) if accumulate else None
    return EsnState(np.zeros(config.reservoir_size), gram, cross, np.zeros((n, ns)))


def augment(z: np.ndarray, h: np.ndarray) -> np.ndarray:
    return np.concatenate(([1.0], z, h))


def esn_step(h: np.ndarray, weights: EsnWeights, z: np.ndarray, config: EsnConfig) -> np.ndarray:
    """Leaky reservoir update driven by ``z``; returns the next internal signal."""
    pre = weights.w_res @ h + weights.w_in @ z + weights.w_bias
    return (1.0 - config.leak) * h + config.leak * config.f1(pre)


def ridge_accumulate(state: EsnState, s: np.ndarray, target: np.ndarray) -> None:
    """Add one (signal, target) pair: gram += s s', cross += x s'."""
    s = np.asarray(s, dtype=float)
    target = np.asarray(target, dtype=float)
    if state.gram is not None:
        state.gram += np.outer(s, s)
        state.cross += np.outer(target, s)
    T = state.steps
    if T + 1 > state._K.shape[0]:
        cap = 2 * T + 8
        K = np.zeros((cap, cap))
        S = np.zeros((cap, s.size))
        X = np.zeros((cap, target.size))
        if T:
            K[:T, :T] = state.kernel
            S[:T] = state.S
            X[:T] = state.X
        state._K, state._S, state._X = K, S, X
    row = state.S @ s
    state._K[T, :T] = row
    state._K[:T, T] = row
    state._K[T, T] = s @ s
    state._S[T] = s
    state._X[T] = target
    state._T = T + 1


def ridge_solve(state: EsnState, epsilon: float, form: str = "auto") -> np.ndarray:
    """Regularized least-squares readout from the accumulated products.

    ``form='primal'`` factors ``gram + eps I`` (N_s x N_s); ``'dual'`` factors
    the T x T kernel of the stored history, which gives the same matrix for
    eps > 0 and is far cheaper while T < N_s. ``'auto'`` picks the smaller.
    Finiteness is not re-checked: frames reject non-finite measurements.
    """
    ns = state.n_s
    T = state.steps
    if form == "auto":
        form = "dual" if 0 < T < ns and epsilon > 0 else "primal"
    if form == "dual":
        if epsilon <= 0:
            raise ValueError("the kernel form needs epsilon > 0")
        S, X = state.S, state.X
        K = state.kernel + epsilon * np.eye(T)
        try:
            c = sla.cho_factor(K, lower=True, check_finite=False)
        except sla.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"ridge kernel not positive definite: {exc}") from exc
        return sla.cho_solve(c, X, check_finite=False).T @ S
    gram, cross = state.products()
    A = gram + epsilon * np.eye(ns)
    try:
        c = sla.cho_factor(A, lower=True, check_finite=False)
    except sla.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"ridge system not positive definite: {exc}") from exc
    return sla.cho_solve(c, cross.T, check_finite=False).T


def lms_correct(w_out: np.ndarray, x_true: np.ndarray, x_est: np.ndarray, s: np.ndarray,
                eta: float) -> np.ndarray:
    """One least-mean-squares step: W + eta (x_true - x_est) s'."""
    return w_out + eta * np.outer(np.asarray(x_true) - np.asarray(x_est), s)


def esn_readout(w_out: np.ndarray, s: np.ndarray, output_scale: float = 1.0) -> np.ndarray:
    return (w_out @ s) / output_scale


@dataclass(frozen=True)
class EsnSetup:
    """Both networks plus the online supervision choice.

    ``supervision='wls'`` trains on a least-squares estimate of each new
    frame after the warm-up: ``proxy_iterations`` Gauss-Newton steps started
    from the network's own output, with the gain frozen at the last warm-up
    state (``proxy_gain='fixed'``) or re-linearized every step
    (``'current'``). ``'oracle'`` trains on the true states throughout.
    """

    magnitude: EsnConfig = MAGNITUDE_CONFIG
    angle: EsnConfig = ANGLE_CONFIG
    supervision: str = "wls"
    proxy_iterations: int = 1
    proxy_gain: str = "fixed"
    warmup: int = WARMUP
    ridge_form: str = "auto"

    def __post_init__(self):
        if self.supervision not in ("wls", "oracle"):
            raise ValueError(f"unknown supervision {self.supervision!r}")
        if self.proxy_gain not in ("fixed", "current"):
            raise ValueError(f"unknown proxy_gain {self.proxy_gain!r}")
        if self.proxy_iterations < 1:
            raise ValueError("proxy_iterations must be at least 1")

    @classmethod
    def from_dict(cls, d: dict) -> "EsnSetup":
        d = dict(d)
        mag = EsnConfig(**{**asdict(MAGNITUDE_CONFIG), **d.pop("magnitude", {})})
        ang = EsnConfig(**{**asdict(ANGLE_CONFIG), **d.pop("angle", {})})
        return cls(magnitude=mag, angle=ang, **d)

    def to_dict(self) -> dict:
        return asdict(self)


class _Network:
    """One reservoir plus its readout, trained online."""

    def __init__(self, config: EsnConfig, weights: EsnWeights, n_out: int, form: str):
        self.cfg = config
        self.w = weights
        # the kernel form never needs the N_s x N_s gram
        self.state = fresh_state(config, weights.m, n_out, accumulate=form == "primal")
        self.form = form
        self.s = None

    def observe(self, z: np.ndarray) -> np.ndarray:
        self.s = augment(self.cfg.readout_input(z), self.state.h)
        return esn_readout(self.state.w_out, self.s, self.cfg.output_scale)

    def learn(self, target: np.ndarray, lms: bool) -> None:
        """Accumulate, re-solve the ridge readout, then apply one LMS correction.

        The LMS error is measured against the fresh ridge readout of the
        current signal. Measuring it against the emitted estimate instead
        feeds the previous correction back in and diverges once
        eta * |s|^2 > 1.
        """
        c = self.cfg
        y = c.output_scale * target
        ridge_accumulate(self.state, self.s, y)
        w = ridge_solve(self.state, c.ridge_epsilon, self.form)
        if lms:
            w = lms_correct(w, y, w @ self.s, self.s, c.lms_eta)
        self.state.w_out = w

    def advance(self, z: np.ndarray) -> None:
        self.state.h = esn_step(self.state.h, self.w, z, self.cfg)


def esn_run(traj: ScenarioTrajectory, plan: MeasurementPlan, ybus: AdmittanceMatrix,
            setup: EsnSetup = EsnSetup(), ks=None,
            weights: tuple[EsnWeights, EsnWeights] | None = None) -> EstimatorRun:
    """Warm up on true states, then estimate and keep training online.

    ``weights`` lets callers pass prebuilt reservoirs (magnitude, angle);
    otherwise they are drawn from the configs (and cached).
    """
    m, n = plan.m, plan.n
    if weights is None:
        weights = (cached_init(setup.magnitude, m, n), cached_init(setup.angle, m, n))
    rec = Recorder("esn", n, ks if ks is not None else eval_steps(traj, setup.warmup))
    nets = (_Network(setup.magnitude, weights[0], n, setup.ridge_form),
            _Network(setup.angle, weights[1], n, setup.ridge_form))
    mm = model_for(plan, ybus)
    w_inv = 1.0 / plan.r_diag
    keep = np.delete(np.arange(n), plan.slack)
    fixed = None
    for k in range(1, traj.T + 1):
        t0 = time.perf_counter()
        z = traj.frames[k - 1].z
        v_hat = nets[0].observe(z)
        th_hat = nets[1].observe(z)
        th_hat = th_hat - th_hat[plan.slack]
        training = k <= setup.warmup
        if training or setup.supervision == "oracle":
            truth = traj.truth[k - 1]
            v_t, th_t = truth.v, truth.theta
        else:
            x0 = np.r_[th_hat[keep], np.maximum(v_hat, 0.5)]
            try:
                if setup.proxy_gain == "fixed":
                    if fixed is None:
                        fixed = FixedGainWls(mm, w_inv, traj.truth[setup.warmup - 1].pack(plan.slack))
                    x = fixed.refine(z, x0, setup.proxy_iterations)
                else:
                    x, *_ = gauss_newton(mm, z, w_inv, x0, 0.0, setup.proxy_iterations)
                if not np.all(np.isfinite(x)):
                    raise ValueError("non-finite proxy state")
                proxy = StateVector.unpack(x, plan.slack)
                v_t, th_t = proxy.v, proxy.theta
            except (ObservabilityError, ValueError) as exc:
                # no usable target: keep the current readout for this step
                rec.event(k, f"supervision estimate failed: {exc}")
                v_t = th_t = None
        if v_t is None:
            pass
        elif training and k < setup.warmup:
            # accumulate only; the first solve happens at the end of warm-up
            for net, tgt in zip(nets, (v_t, th_t)):
                ridge_accumulate(net.state, net.s, net.cfg.output_scale * tgt)
        else:
            nets[0].learn(v_t, not training)
            nets[1].learn(th_t, not training)
        nets[0].advance(z)
        nets[1].advance(z)
        dt = time.perf_counter() - t0
        if rec.wants(k):
            rec.put(k, StateVector(v_hat, th_hat), dt)
    return rec.finish()
