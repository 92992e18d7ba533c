"""Bootstrap particle filter with persistence dynamics.

Weights are kept in the log domain until normalization. Particles live in
packed coordinates ``[theta (slack removed), v]``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.special import logsumexp

from ..measurements import MeasurementFrame, MeasurementPlan, model_for
from ..network import AdmittanceMatrix
from ..scenario import ScenarioTrajectory
from ..state import StateVector, unpack_batch
from .base import EstimatorRun, Recorder, eval_steps
from .wls import WlsConfig, wls_estimate


@dataclass(frozen=True, eq=False)
class ParticleSet:
    particles: np.ndarray  # (N, nx)
    weights: np.ndarray    # (N,)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if self.particles.ndim != 2 or w.shape != (self.particles.shape[0],):
            raise ValueError("need (N, nx) particles and N weights")
        if w.size < 2:
            raise ValueError("need at least two particles")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be non-negative and sum to one")

    @property
    def N(self) -> int:
        return self.weights.size

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights ** 2))

    @classmethod
    def around(cls, x0: np.ndarray, N: int, spread: float, rng: np.random.Generator) -> "ParticleSet":
        x0 = np.asarray(x0, dtype=float)
        parts = x0[None, :] + spread * rng.standard_normal((N, x0.size))
        return cls(parts, np.full(N, 1.0 / N))


@dataclass(frozen=True)
class PfConfig:
    """Particle-filter settings.

    ``resample_policy`` is ``"every-step"`` or ``"ess"`` (resample when the
    effective sample size falls below ``ess_threshold * N``).

    ``init`` picks how the first frame is assimilated:

    - ``"temper"``: a Gaussian cloud around the flat start (spreads
      ``prior_theta_sigma`` rad, ``prior_v_sigma`` p.u.) is moved to the
      first-frame posterior by likelihood tempering (:func:`pf_temper`); a
      single reweighting of that cloud would leave one surviving particle.
    - ``"wls"``: the cloud is drawn from the Gaussian approximation of the
      first-frame posterior, N(x_wls, G^-1) with G the WLS gain matrix.
      Default: it scales to large systems, where tempering needs thousands
      of stages.
    """

    N: int = 1000
    process_sigma: float = 1e-3
    resample_policy: str = "every-step"
    ess_threshold: float = 0.5
    seed: int = 0
    r: float | None = None  # None: channel sigmas squared
    prior_theta_sigma: float = 0.3
    prior_v_sigma: float = 0.05
    init: str = "wls"
    temper_ess: float = 0.5
    temper_moves: int = 10
    temper_max_stages: int = 2000

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("need at least two particles")
        if not self.process_sigma > 0:
            raise ValueError("process_sigma must be positive")
        if self.resample_policy not in ("every-step", "ess"):
            raise ValueError(f"unknown resample policy {self.resample_policy!r}")
        if not 0 < self.ess_threshold <= 1:
            raise ValueError("ess_threshold must lie in (0, 1]")
        if self.init not in ("temper", "wls"):
            raise ValueError(f"unknown init {self.init!r}")
        if not 0 < self.temper_ess < 1:
            raise ValueError("temper_ess must lie in (0, 1)")
        if self.prior_theta_sigma <= 0 or self.prior_v_sigma <= 0:
            raise ValueError("prior spreads must be positive")

    def r_diag(self, plan: MeasurementPlan) -> np.ndarray:
        return plan.r_diag if self.r is None else np.full(plan.m, float(self.r))

    def prior_sigmas(self, n: int) -> np.ndarray:
        return np.r_[np.full(n - 1, self.prior_theta_sigma), np.full(n, self.prior_v_sigma)]

    @classmethod
    def from_dict(cls, d: dict) -> "PfConfig":
        return cls(**d)


def pf_predict(ps: ParticleSet, sigma: float, rng: np.random.Generator) -> ParticleSet:
    """Persistence plus independent Gaussian perturbation; weights carried over."""
    noise = rng.standard_normal(ps.particles.shape)
    return ParticleSet(ps.particles + sigma * noise, ps.weights)


def log_likelihood(particles: np.ndarray, z: np.ndarray, plan: MeasurementPlan,
                   ybus: AdmittanceMatrix, r_diag: np.ndarray) -> np.ndarray:
    """Gaussian log-likelihood of ``z`` for every particle, up to a constant."""
    mm = model_for(plan, ybus)
    v, th = unpack_batch(particles, plan.slack)
    bad = np.any(v <= 0, axis=1)
    r = z[None, :] - mm.h_batch(np.abs(v), th)
    ll = -0.5 * np.sum(r * r / r_diag[None, :], axis=1)
    ll[bad] = -np.inf
    return ll


@dataclass(frozen=True, eq=False)
class UpdateResult:
    particles: ParticleSet
    estimate: np.ndarray
    underflow: bool


def pf_update(ps: ParticleSet, frame: MeasurementFrame, plan: MeasurementPlan,
              ybus: AdmittanceMatrix, r_diag: np.ndarray) -> UpdateResult:
    """Reweight by the measurement likelihood and return the weighted mean.

    If every particle has zero likelihood (all log-weights are -inf) the
    weights are reset to uniform and ``underflow`` is set.
    """
    with np.errstate(divide="ignore"):
        logw = np.log(ps.weights) + log_likelihood(ps.particles, frame.z, plan, ybus, np.asarray(r_diag))
    underflow = not np.any(np.isfinite(logw))
    if underflow:
        w = np.full(ps.N, 1.0 / ps.N)
    else:
        w = np.exp(logw - logsumexp(logw))
        w /= w.sum()
    out = ParticleSet(ps.particles, w)
    return UpdateResult(out, out.mean(), underflow)


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    N = weights.size
    u = (rng.random() + np.arange(N)) / N
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right")


def pf_resample(ps: ParticleSet, rng: np.random.Generator) -> ParticleSet:
    """Systematic resampling; all weights reset to 1/N."""
    idx = systematic_indices(ps.weights, rng)
    return ParticleSet(ps.particles[idx], np.full(ps.N, 1.0 / ps.N))


def pf_rng(seed: int, trajectory_seed: int = 0) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(trajectory_seed), 0x5046])


def _ess_of(logw: np.ndarray) -> float:
    w = np.exp(logw - logsumexp(logw))
    return float(1.0 / np.sum(w * w))


def next_temperature(ll: np.ndarray, lam: float, target: float) -> float:
    """Largest exponent step keeping the incremental-weight ESS at ``target`` (bisection)."""
    if _ess_of((1.0 - lam) * ll) >= target:
        return 1.0
    lo, hi = 0.0, 1.0 - lam
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _ess_of(mid * ll) >= target:
            lo = mid
        else:
            hi = mid
    return lam + max(lo, 1e-12)


@dataclass(frozen=True, eq=False)
class TemperResult:
    particles: ParticleSet
    stages: int
    acceptance: float
    reached: bool


def pf_temper(ps: ParticleSet, frame: MeasurementFrame, plan: MeasurementPlan, ybus: AdmittanceMatrix,
              r_diag: np.ndarray, prior_mean: np.ndarray, prior_sigma: np.ndarray,
              rng: np.random.Generator, ess_target: float = 0.5, moves: int = 10,
              max_stages: int = 2000) -> TemperResult:
    """Move an equally weighted prior cloud to the posterior of one frame.

    The likelihood enters as L(x)^lam with lam raised from 0 to 1 in adaptive
    increments; each increment is followed by systematic resampling and
    random-walk Metropolis moves whose proposal is shaped by the cloud
    covariance. Returns an equally weighted set.
    """
    N, nx = ps.particles.shape
    x = ps.particles.copy()
    ll = log_likelihood(x, frame.z, plan, ybus, r_diag)

    def log_prior(y):
        return -0.5 * np.sum(((y - prior_mean) / prior_sigma) ** 2, axis=1)

    lp = log_prior(x)
    lam = 0.0
    stages = 0
    accepted = proposed = 0
    scale = 2.38 / np.sqrt(nx)
    while lam < 1.0 and stages < max_stages:
        new = next_temperature(ll, lam, ess_target * N)
        logw = (new - lam) * ll
        w = np.exp(logw - logsumexp(logw))
        w /= w.sum()
        lam = new
        idx = systematic_indices(w, rng)
        x, ll, lp = x[idx], ll[idx], lp[idx]
        cov = np.cov(x, rowvar=False) + 1e-12 * np.eye(nx)
        L = np.linalg.cholesky(cov)
        for _ in range(moves):
            prop = x + scale * rng.standard_normal((N, nx)) @ L.T
            ll_p = log_likelihood(prop, frame.z, plan, ybus, r_diag)
            lp_p = log_prior(prop)
            with np.errstate(invalid="ignore"):
                log_a = lam * (ll_p - ll) + lp_p - lp
            ok = np.log(rng.random(N)) < np.nan_to_num(log_a, nan=-np.inf)
            x[ok], ll[ok], lp[ok] = prop[ok], ll_p[ok], lp_p[ok]
            accepted += int(ok.sum())
            proposed += N
            rate = ok.mean()
            # keep the acceptance near the usual random-walk optimum
            scale *= np.exp(rate - 0.25)
        stages += 1
    out = ParticleSet(x, np.full(N, 1.0 / N))
    return TemperResult(out, stages, accepted / max(proposed, 1), lam >= 1.0)


def pf_init_wls(frame: MeasurementFrame, plan: MeasurementPlan, ybus: AdmittanceMatrix,
                r_diag: np.ndarray, N: int, rng: np.random.Generator) -> ParticleSet:
    """Equally weighted draw from N(x_wls, G^-1) for one frame."""
    res = wls_estimate(frame, plan, ybus, WlsConfig(r_diag=np.asarray(r_diag)))
    x = res.state.pack(plan.slack)
    H = model_for(plan, ybus).jacobian_x(x)
    G = H.T @ (H / np.asarray(r_diag)[:, None])
    L = sla.cholesky(G, lower=True)
    # G = L L' so L'^-1 eps has covariance G^-1
    eps = rng.standard_normal((x.size, N))
    parts = x[None, :] + sla.solve_triangular(L.T, eps, lower=False).T
    return ParticleSet(parts, np.full(N, 1.0 / N))


def pf_run(traj: ScenarioTrajectory, plan: MeasurementPlan, ybus: AdmittanceMatrix,
           config: PfConfig = PfConfig(), ks=None) -> EstimatorRun:
    """Filter every step; the first frame initializes the cloud (see ``PfConfig.init``)."""
    rec = Recorder("pf", plan.n, ks if ks is not None else eval_steps(traj))
    rng = pf_rng(config.seed, traj.seed)
    r_diag = config.r_diag(plan)
    x0 = StateVector.flat(plan.n).pack(plan.slack)
    init = config.init
    ess_log = []
    diag: dict = {"init": init}
    ps = None
    for k in range(1, traj.T + 1):
        t0 = time.perf_counter()
        frame = traj.frames[k - 1]
        if k == 1 and init == "temper":
            prior_sigma = config.prior_sigmas(plan.n)
            parts = x0[None, :] + prior_sigma[None, :] * rng.standard_normal((config.N, x0.size))
            res = pf_temper(ParticleSet(parts, np.full(config.N, 1.0 / config.N)), frame, plan, ybus, r_diag,
                            x0, prior_sigma, rng, config.temper_ess, config.temper_moves, config.temper_max_stages)
            if not res.reached:
                rec.event(k, f"tempering stopped after {res.stages} stages")
            diag.update(temper_stages=res.stages, temper_acceptance=res.acceptance)
            ps = res.particles
            estimate = ps.mean()
        elif k == 1:
            ps = pf_init_wls(frame, plan, ybus, r_diag, config.N, rng)
            estimate = ps.mean()
        else:
            ps = pf_predict(ps, config.process_sigma, rng)
            upd = pf_update(ps, frame, plan, ybus, r_diag)
            if upd.underflow:
                rec.event(k, "all particle likelihoods underflowed; weights reset to uniform")
            ps = upd.particles
            estimate = upd.estimate
            ess_log.append(ps.ess())
            if config.resample_policy == "every-step" or ps.ess() < config.ess_threshold * ps.N:
                ps = pf_resample(ps, rng)
        dt = time.perf_counter() - t0
        if rec.wants(k):
            rec.put(k, StateVector.unpack(estimate, plan.slack), dt)
    return rec.finish(ess=ess_log, **diag)
