"""Particle belief operations over the augmented system."""

import numpy as np
import pytest
from scipy.integrate import quad

from dosewise import rng as rngmod
from dosewise.augmented import AugmentedDynamics, AugmentedParticles, AugmentedState
from dosewise.belief import (AugmentedPrior, DegenerateUpdateError, ParticleBelief,
                             bayes_update, belief_summary, initial_belief,
                             observation_logdensity, predict, sample_transition,
                             systematic_resample, weighted_quantiles)
from dosewise.estimator import EstimatorConfig
from dosewise.model import ModelSpec, NoiseModel
from dosewise.timegrid import TimeStructure


@pytest.fixture
def dyn(app_config) -> AugmentedDynamics:
    return app_config.dynamics()


@pytest.fixture
def prior(app_config) -> AugmentedPrior:
    return app_config.prior()


def scalar_dyn(sd_w=0.7):
    """1-state 1-output model for quadrature-style checks."""
    spec = ModelSpec(
        n=1, m=1, p=1,
        f=lambda t, x, u, d, th: 0.9 * x + (d if d is not None else 0.0),
        h=lambda t, x, th: np.array([2.0 * x[0]]),
        dfdx=lambda t, x, u, d, th: np.array([[0.9]]),
        dfdth=lambda t, x, u, d, th: np.zeros((1, 1)),
        dhdx=lambda t, x, th: np.array([[2.0]]),
        dhdth=lambda t, x, th: np.zeros((1, 1)),
        u_max=1.0,
    )
    ts = TimeStructure(n_steps=4, delta=1.0, t_meas={0, 2, 4}, t_dec={0})
    noise = NoiseModel.diagonal([0.3], [sd_w])
    return AugmentedDynamics(spec, ts, noise, EstimatorConfig())


class TestParticleBelief:
    def test_weights_normalized(self, rng):
        pts = AugmentedParticles(x=np.ones((4, 8)), xi=np.zeros((4, 8, 8)),
                                 theta=np.ones((4, 8)))
        b = ParticleBelief.from_unnormalized(pts, np.array([0.0, -1.0, -2.0, -3.0]))
        assert b.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_at_least_one_particle(self):
        pts = AugmentedParticles(x=np.ones((0, 8)), xi=np.zeros((0, 8, 8)),
                                 theta=np.ones((0, 8)))
        with pytest.raises(ValueError):
            ParticleBelief.uniform(pts)

    def test_ess_bounds(self, rng):
        pts = AugmentedParticles(x=np.ones((10, 8)), xi=np.zeros((10, 8, 8)),
                                 theta=np.ones((10, 8)))
        uni = ParticleBelief.uniform(pts)
        assert uni.ess == pytest.approx(10.0)
        lw = np.full(10, -np.inf)
        lw[3] = 0.0
        degenerate = ParticleBelief.from_unnormalized(pts, lw)
        assert degenerate.ess == pytest.approx(1.0)


class TestObservationDensity:
    def test_mode_value(self, dyn, x0, theta0):
        chi = AugmentedState(x0, np.zeros((8, 8)), theta0)
        y = dyn.spec.h(0, x0, theta0)
        sigma = dyn.noise.sigma_w
        expected = -0.5 * (2 * np.log(2 * np.pi) + np.log(np.linalg.det(sigma)))
        assert observation_logdensity(dyn, y, chi, 0) == pytest.approx(expected, rel=1e-12)

    def test_integrates_to_one(self):
        dyn = scalar_dyn(sd_w=0.7)
        chi = AugmentedState(np.array([1.3]), np.zeros((1, 1)), np.array([1.0]))
        f = lambda y: np.exp(observation_logdensity(dyn, np.array([y]), chi, 0))
        total, err = quad(f, 2.6 - 12 * 0.7, 2.6 + 12 * 0.7, limit=200)
        assert abs(total - 1.0) < 1e-6

    def test_translation_invariance(self, dyn, x0, theta0, rng):
        chi = AugmentedState(x0, np.zeros((8, 8)), theta0)
        y = np.array([3e9, 1.5e9])
        base = observation_logdensity(dyn, y, chi, 0)
        # shifting y and the predicted output by the same vector: same value
        shift = rng.normal(size=2) * 1e8
        chi2 = AugmentedState(x0.copy(), np.zeros((8, 8)), theta0)
        resid_direct = y - dyn.spec.h(0, x0, theta0)
        assert dyn.noise.logpdf_measure(resid_direct) == pytest.approx(base, rel=1e-14)
        assert dyn.noise.logpdf_measure((y + shift) - (dyn.spec.h(0, x0, theta0) + shift)) \
            == pytest.approx(base, rel=1e-12)

    def test_off_calendar_raises_and_counts(self, dyn, x0, theta0):
        chi = AugmentedState(x0, np.zeros((8, 8)), theta0)
        before = dyn.off_calendar_queries
        with pytest.raises(ValueError):
            observation_logdensity(dyn, np.zeros(2), chi, 5)
        assert dyn.off_calendar_queries == before + 1


class TestSampleTransition:
    def test_zero_noise_is_deterministic_image(self, theta0, x0, app_config):
        cfg = app_config
        dyn = AugmentedDynamics(cfg.model(), cfg.time_structure(),
                                NoiseModel.diagonal(np.zeros(8), [1e-12, 1e-12]),
                                cfg.estimator(), cfg.cost())
        chi = AugmentedState(x0, np.zeros((8, 8)), theta0)
        r = rngmod.stream(0, 1)
        got = sample_transition(dyn, chi, 10.0, 5, r)
        want = dyn.step_no_meas(chi, 10.0, np.zeros(8), 5)
        np.testing.assert_array_equal(got.x, want.x)

    def test_no_measurement_stream_consumed_off_calendar(self, dyn, x0, theta0):
        # the same generator state must produce the same process-noise draw
        # whether or not a measurement branch exists elsewhere
        chi = AugmentedState(x0, np.zeros((8, 8)), theta0)
        r1 = rngmod.stream(7, 1)
        out = sample_transition(dyn, chi, 0.0, 5, r1)
        r2 = rngmod.stream(7, 1)
        d = dyn.noise.sample_process(r2)
        want = dyn.step_no_meas(chi, 0.0, d, 5)
        np.testing.assert_array_equal(out.x, want.x)
        np.testing.assert_array_equal(out.theta_hat, chi.theta_hat)


class TestPredict:
    def test_weights_preserved(self, dyn, prior, rng):
        pts = prior.sample(rngmod.stream(1, 2), 64)
        lw = np.log(rng.dirichlet(np.ones(64)))
        lw -= np.log(np.sum(np.exp(lw)))
        b = ParticleBelief(pts, lw)
        out = predict(dyn, b, 20.0, 3, rngmod.stream(1, 3))
        np.testing.assert_array_equal(out.log_weights, b.log_weights)

    def test_rejects_measurement_step(self, dyn, prior):
        b = ParticleBelief.uniform(prior.sample(rngmod.stream(1, 2), 8))
        with pytest.raises(ValueError):
            predict(dyn, b, 0.0, 167, rngmod.stream(1, 3))

    def test_dirac_zero_noise_stays_dirac(self, app_config, x0, theta0):
        cfg = app_config
        dyn = AugmentedDynamics(cfg.model(), cfg.time_structure(),
                                NoiseModel.diagonal(np.zeros(8), [1.0, 1.0]),
                                cfg.estimator(), cfg.cost())
        pts = AugmentedParticles(x=np.tile(x0, (16, 1)), xi=np.zeros((16, 8, 8)),
                                 theta=np.tile(theta0, (16, 1)))
        out = predict(dyn, ParticleBelief.uniform(pts), 5.0, 3, rngmod.stream(0, 0))
        assert np.all(out.particles.x == out.particles.x[0])


class TestBayesUpdate:
    def test_posterior_dirac_when_one_particle_impossible(self):
        # exact-zero likelihood needs a discrete observation model
        from dosewise.toys import FiniteToyPOMDP, ToyFilter, ToyParticles
        toy = FiniteToyPOMDP(
            transition=np.array([np.eye(2)]), observation=np.array([[1.0, 0.0],
                                                                    [0.0, 1.0]]),
            stage_cost=np.zeros((2, 2, 1)), terminal_cost=np.zeros(2),
            t_meas={1, 2}, t_dec={0}, p0=np.array([0.5, 0.5]))
        f = ToyFilter(toy)
        b = ParticleBelief.uniform(ToyParticles(np.array([0, 1])))
        out = f.bayes_update(b, 0, 0, 0, np.random.default_rng(0))
        hist = f.histogram(out)
        np.testing.assert_allclose(hist, [1.0, 0.0], atol=1e-12)

    def test_uninformative_likelihood_equals_predict(self, app_config, x0, theta0):
        from dosewise.toys import FiniteToyPOMDP, ToyFilter, ToyParticles
        toy = FiniteToyPOMDP(
            transition=np.array([[[0.7, 0.3], [0.2, 0.8]]]),
            observation=np.full((2, 2), 0.5),
            stage_cost=np.zeros((2, 2, 1)), terminal_cost=np.zeros(2),
            t_meas={1}, t_dec={0}, p0=np.array([0.4, 0.6]))
        f = ToyFilter(toy)
        b = ParticleBelief.uniform(ToyParticles(np.random.default_rng(5).integers(0, 2, 4000)))
        upd = f.bayes_update(b, 0, 1, 0, np.random.default_rng(1))
        prd_particles = f._propagate(b.particles, 0, np.random.default_rng(1))
        # same generator sequence: the propagation draws are identical, and an
        # uninformative likelihood leaves the weights untouched (ESS stays full,
        # so no resampling either)
        np.testing.assert_array_equal(upd.particles.states, prd_particles.states)
        np.testing.assert_allclose(upd.weights, b.weights)

    def test_all_zero_likelihood_raises_degenerate(self, app_config, x0, theta0):
        from dosewise.toys import FiniteToyPOMDP, ToyFilter, ToyParticles
        toy = FiniteToyPOMDP(
            transition=np.array([np.eye(2)]),
            observation=np.array([[1.0, 0.0], [1.0, 0.0]]),
            stage_cost=np.zeros((2, 2, 1)), terminal_cost=np.zeros(2),
            t_meas={1}, t_dec={0}, p0=np.array([0.5, 0.5]))
        f = ToyFilter(toy)
        b = ParticleBelief.uniform(ToyParticles(np.array([0, 1, 0])))
        with pytest.raises(DegenerateUpdateError) as exc:
            f.bayes_update(b, 0, 1, 0, np.random.default_rng(0))
        assert exc.value.max_loglik == -np.inf

    def test_rejects_wrong_step(self, dyn, prior):
        b = ParticleBelief.uniform(prior.sample(rngmod.stream(1, 2), 8))
        with pytest.raises(ValueError):
            bayes_update(dyn, b, 0.0, np.zeros(2), 5, rngmod.stream(1, 3))


class TestInitialBelief:
    def test_unconditioned_uniform_weights(self, dyn, prior):
        b = initial_belief(dyn, prior.sample, None, rngmod.stream(2, 0), 128)
        np.testing.assert_allclose(b.weights, np.full(128, 1 / 128))

    def test_dirac_prior_stays_dirac_after_conditioning(self, app_config, x0, theta0):
        cfg = app_config
        dyn = cfg.dynamics()
        prior = AugmentedPrior(x0_mean=x0, x0_rel_sd=0.0, theta0=theta0)
        y0 = np.array([2.9e9, 1.4e9])
        b = initial_belief(dyn, prior.sample, y0, rngmod.stream(2, 1), 64)
        assert np.all(b.particles.x == b.particles.x[0])
        np.testing.assert_allclose(b.weights, np.full(64, 1 / 64))

    def test_conditioning_tilts_weights_toward_measurement(self, dyn, prior):
        y0 = np.array([3.1e9, 1.55e9])       # above the prior mean
        b = initial_belief(dyn, prior.sample, y0, rngmod.stream(2, 2), 4000,
                           resample_threshold=0.0)   # keep raw weights
        w = b.weights
        x8 = b.particles.x[:, 7]
        heavy = x8[w > np.quantile(w, 0.9)]
        assert heavy.mean() > x8.mean()


class TestResampling:
    def test_systematic_matches_weights(self, rng):
        w = np.array([0.5, 0.25, 0.125, 0.125])
        counts = np.zeros(4)
        for _ in range(500):
            idx = systematic_resample(w, rng)
            counts += np.bincount(idx, minlength=4)
        freq = counts / counts.sum()
        np.testing.assert_allclose(freq, w, atol=0.02)

    def test_exchangeability(self, dyn, prior, rng):
        # permuting particles leaves weighted expectations unchanged
        pts = prior.sample(rngmod.stream(3, 0), 256)
        lw = np.log(rng.dirichlet(np.ones(256)))
        b = ParticleBelief.from_unnormalized(pts, lw)
        perm = rng.permutation(256)
        b2 = ParticleBelief(pts.select(perm), b.log_weights[perm])
        m1 = b.weights @ b.particles.x
        m2 = b2.weights @ b2.particles.x
        np.testing.assert_allclose(m1, m2, rtol=1e-12)
        assert dyn.stage_cost_batch(b.particles, 0.0, 1) @ b.weights == pytest.approx(
            dyn.stage_cost_batch(b2.particles, 0.0, 1) @ b2.weights, rel=1e-12)


class TestPrior:
    def test_zero_sd_components_exact(self, prior):
        pts = prior.sample(rngmod.stream(4, 0), 512)
        assert np.all(pts.x[:, 0] == prior.x0_mean[0])
        assert np.all(pts.x[:, 1] == prior.x0_mean[1])
        assert np.all(pts.x >= 0.0)
        assert np.all(pts.x[:, 3:] > 0.0)    # positive wherever the sd is positive
        assert np.all(pts.xi == 0.0)
        assert np.all(pts.theta == np.asarray(prior.theta0))

    def test_spread_matches_request(self, prior):
        pts = prior.sample(rngmod.stream(4, 1), 20000)
        sd = pts.x[:, 7].std() / prior.x0_mean[7]
        assert sd == pytest.approx(prior.x0_rel_sd, rel=0.05)


class TestSummary:
    def test_summary_fields_and_quantiles(self, dyn, prior):
        b = ParticleBelief.uniform(prior.sample(rngmod.stream(5, 0), 256))
        s = belief_summary(b, top_k=5)
        assert len(s["top_particles"]) == 5
        assert s["n_particles"] == 256
        assert s["anc_quantiles"]["q10"] <= s["anc_quantiles"]["q50"] <= s["anc_quantiles"]["q90"]

    def test_weighted_quantiles_step_function(self):
        v = np.array([1.0, 2.0, 3.0, 4.0])
        w = np.array([0.1, 0.4, 0.4, 0.1])
        qs = weighted_quantiles(v, w, (0.05, 0.5, 0.95))
        assert qs == [1.0, 2.0, 4.0]
