import numpy as np
import pytest

from qsse.estimators.pf import (ParticleSet, PfConfig, log_likelihood, next_temperature, pf_predict, pf_resample,
                                pf_rng, pf_run, pf_temper, pf_update, systematic_indices)
from qsse.scenario import make_trajectory

from oracles import grid_posterior, two_bus_posterior_problem
from qsse.state import StateVector


def test_particle_set_validation():
    with pytest.raises(ValueError):
        ParticleSet(np.zeros((3, 2)), np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ValueError):
        ParticleSet(np.zeros((1, 2)), np.array([1.0]))
    ps = ParticleSet(np.arange(6.0).reshape(3, 2), np.array([0.5, 0.25, 0.25]))
    assert np.allclose(ps.mean(), [1.5, 2.5])
    assert ps.ess() == pytest.approx(1 / 0.375)


def test_predict_keeps_weights_and_spreads(rng):
    ps = ParticleSet(np.zeros((5000, 3)), np.full(5000, 1 / 5000))
    out = pf_predict(ps, 0.01, rng)
    assert np.array_equal(out.weights, ps.weights)
    assert np.allclose(out.particles.std(axis=0), 0.01, rtol=0.05)


def test_systematic_copy_counts_within_multinomial_bounds():
    rng = np.random.default_rng(7)
    N = 200
    w = rng.dirichlet(np.full(N, 0.3))
    mean = N * w
    sd = np.sqrt(N * w * (1 - w))
    totals = np.zeros(N)
    for _ in range(1000):
        counts = np.bincount(systematic_indices(w, rng), minlength=N)
        assert counts.sum() == N
        assert np.all(np.abs(counts - mean) <= 3 * sd + 1)
        totals += counts
    # unbiased: average copy count equals N w
    assert np.allclose(totals / 1000, mean, atol=0.1)


def test_resample_resets_weights(rng):
    ps = ParticleSet(rng.standard_normal((50, 2)), rng.dirichlet(np.ones(50)))
    out = pf_resample(ps, rng)
    assert np.all(out.weights == 1 / 50)
    assert set(map(tuple, out.particles)) <= set(map(tuple, ps.particles))


def test_weights_normalized_every_step(traj14, ybus14):
    plan = traj14.plan
    cfg = PfConfig(N=300)
    rng = pf_rng(0)
    truth = traj14.truth[0].pack(plan.slack)
    ps = ParticleSet.around(truth, cfg.N, 1e-3, rng)
    for frame in traj14.frames[:15]:
        ps = pf_predict(ps, cfg.process_sigma, rng)
        upd = pf_update(ps, frame, plan, ybus14, plan.r_diag)
        assert abs(upd.particles.weights.sum() - 1.0) <= 1e-12
        assert np.all(upd.particles.weights >= 0)
        ps = pf_resample(upd.particles, rng)


def test_underflow_resets_to_uniform(traj14, ybus14):
    plan = traj14.plan
    parts = np.tile(StateVector.flat(14).pack(plan.slack), (10, 1))
    parts[:, 13:] = -1.0  # negative magnitudes: zero likelihood everywhere
    upd = pf_update(ParticleSet(parts, np.full(10, 0.1)), traj14.frames[0], plan, ybus14, plan.r_diag)
    assert upd.underflow
    assert np.all(upd.particles.weights == 0.1)


def test_log_likelihood_far_from_data_is_finite(traj14, ybus14):
    plan = traj14.plan
    x = np.tile(StateVector.flat(14).pack(plan.slack), (3, 1))
    x[1, :13] = 3.0
    ll = log_likelihood(x, traj14.frames[0].z, plan, ybus14, plan.r_diag)
    assert np.all(np.isfinite(ll))
    assert ll[1] < ll[0]


def test_next_temperature_hits_target(rng):
    ll = -50 * rng.random(500) ** 2
    lam = next_temperature(ll, 0.0, 250)
    w = np.exp(lam * (ll - ll.max()))
    w /= w.sum()
    assert 1 / np.sum(w * w) == pytest.approx(250, rel=1e-6)
    assert next_temperature(np.zeros(10), 0.3, 5) == 1.0


@pytest.fixture(scope="module")
def two_bus_problem(two_bus):
    return two_bus_posterior_problem(two_bus)


def test_posterior_mean_matches_grid_oracle(two_bus_problem):
    plan, ybus, frame, prior_mean, prior_sd = two_bus_problem
    mean, sd = grid_posterior(plan, ybus, frame, prior_mean, prior_sd)
    rng = np.random.default_rng(3)
    N = 20000
    ps = ParticleSet(prior_mean + prior_sd * rng.standard_normal((N, 3)), np.full(N, 1 / N))
    upd = pf_update(ps, frame, plan, ybus, plan.r_diag)
    mc_sd = sd / np.sqrt(upd.particles.ess())
    assert np.all(np.abs(upd.estimate - mean) <= 3 * mc_sd)


def test_tempering_matches_grid_oracle(two_bus_problem):
    plan, ybus, frame, prior_mean, prior_sd = two_bus_problem
    mean, sd = grid_posterior(plan, ybus, frame, prior_mean, prior_sd)
    rng = np.random.default_rng(5)
    N = 4000
    ps = ParticleSet(prior_mean + prior_sd * rng.standard_normal((N, 3)), np.full(N, 1 / N))
    res = pf_temper(ps, frame, plan, ybus, plan.r_diag, prior_mean, prior_sd, rng)
    assert res.reached and res.stages >= 1
    est = res.particles.mean()
    # after mutation the cloud is roughly independent; allow for residual correlation
    assert np.all(np.abs(est - mean) <= 3 * sd / np.sqrt(N / 4))
    assert np.allclose(res.particles.particles.std(axis=0), sd, rtol=0.15)


def test_run_is_deterministic(case14, ybus14):
    traj = make_trajectory(case14, "normal", seed=1, ybus=ybus14)
    cfg = PfConfig(N=200, temper_moves=3)
    a = pf_run(traj, traj.plan, ybus14, cfg, ks=range(1, 11))
    b = pf_run(traj, traj.plan, ybus14, cfg, ks=range(1, 11))
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.v, b.v)
    assert len(a.diagnostics["ess"]) == traj.T - 1


def test_config_validation(plan14):
    with pytest.raises(ValueError):
        PfConfig(N=1)
    with pytest.raises(ValueError):
        PfConfig(resample_policy="never")
    with pytest.raises(ValueError):
        PfConfig(process_sigma=0)
    assert PfConfig().N == 1000
    assert np.array_equal(PfConfig().r_diag(plan14), plan14.r_diag)
    assert PfConfig().prior_sigmas(3).tolist() == [0.3, 0.3, 0.05, 0.05, 0.05]


def test_ess_policy_resamples_less(case14, ybus14):
    traj = make_trajectory(case14, "normal", seed=2, ybus=ybus14)
    run = pf_run(traj, traj.plan, ybus14, PfConfig(N=200, temper_moves=3, resample_policy="ess", ess_threshold=0.3),
                 ks=range(1, 101))
    assert run.v.shape == (100, 14)
