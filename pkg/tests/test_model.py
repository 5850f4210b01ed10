"""Model core: projections, the 8-compartment dynamics, calibration, noise."""

import numpy as np
import pytest
from scipy.optimize import brentq

from dosewise.model import (THETA0_DEFAULT, X0_DEFAULT, CalibrationError,
                            LeukemiaModel, NoiseModel, RateBlock,
                            calibrate_equilibrium, project_positive,
                            smooth_project, smooth_project_slope, validate_theta)
from oracles import X_TYPICAL, fd_jacobian, random_state, random_theta, rel_err


class TestProjectPositive:
    def test_mixed_signs(self):
        np.testing.assert_array_equal(project_positive([-1.0, 2.0], 1e-6), [1e-6, 2.0])

    def test_already_positive(self):
        np.testing.assert_array_equal(project_positive([3.0, 4.0], 1e-6), [3.0, 4.0])

    def test_all_below_floor(self):
        np.testing.assert_array_equal(project_positive([0.0, 0.0], 0.5), [0.5, 0.5])

    def test_rejects_bad_epsilon(self):
        with pytest.raises(ValueError):
            project_positive([1.0], 0.0)
        with pytest.raises(ValueError):
            project_positive([1.0], -1e-3)


class TestSmoothProject:
    def test_equal_arguments_exact(self):
        eps, beta = 1e-6, 50.0
        out = smooth_project(np.array([eps]), eps, beta)
        assert out[0] == pytest.approx(eps + np.log(2.0) / beta, rel=1e-14)

    def test_footnote_interval(self):
        out = smooth_project(np.array([10.0]), 1e-6, 50.0)
        assert 10.0 <= out[0] <= 10.0 + np.log(2.0) / 50.0

    def test_sandwich_against_hard_floor(self, rng):
        # oracle: the hard projection brackets the smooth one componentwise
        for beta in (1.0, 10.0, 100.0):
            v = rng.uniform(-5.0, 5.0, size=200)
            eps = 10.0 ** rng.uniform(-8, -1)
            hard = project_positive(v, eps)
            soft = smooth_project(v, eps, beta)
            assert np.all(soft >= hard)
            assert np.all(soft <= hard + np.log(2.0) / beta)

    def test_no_overflow_at_extremes(self):
        out = smooth_project(np.array([-1e6, 1e6, 1e12]), 1e-6, 50.0)
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(1e-6, abs=1e-12)
        assert out[2] == pytest.approx(1e12)

    def test_slope_matches_fd(self, rng):
        v = rng.uniform(-2, 2, size=50)
        got = smooth_project_slope(v, 1e-3, 30.0)
        fd = np.array([
            (smooth_project(np.array([vi + 1e-7]), 1e-3, 30.0)[0]
             - smooth_project(np.array([vi - 1e-7]), 1e-3, 30.0)[0]) / 2e-7
            for vi in v
        ])
        assert rel_err(got, fd) < 1e-6


class TestValidateTheta:
    def test_positive_required(self):
        with pytest.raises(ValueError):
            validate_theta(np.array([1.0, -1.0]), neutrophil_fraction_index=None)

    def test_fraction_bounded(self):
        bad = THETA0_DEFAULT.copy()
        bad[-1] = 1.5
        with pytest.raises(ValueError):
            validate_theta(bad)


class TestLeukemiaStep:
    def test_equilibrium_within_smoothmax_slack(self, calibrated_model, x0, theta0):
        x1 = calibrated_model.step(x0, 0.0, None, theta0)
        slack = np.log(2.0) / calibrated_model.beta
        assert np.all(x1 >= np.maximum(x0, calibrated_model.epsilon))
        assert np.all(x1 <= np.maximum(x0, calibrated_model.epsilon) + slack + 1e-12)

    def test_no_conversion_without_plasma_drug(self, calibrated_model, theta0):
        x = random_state(np.random.default_rng(0))
        x[1] = 0.0
        assert LeukemiaModel.conversion_rate(x, theta0) == 0.0

    def test_prolif_sign_flips_at_root(self, calibrated_model, theta0, rng):
        # oracle: scalar root of the net proliferation rate in the metabolite level
        for _ in range(5):
            x = random_state(rng)
            gain = theta0[2] / (1.0 + (x[7] / theta0[4]) ** theta0[3])

            def net(x3):
                xx = x.copy()
                xx[2] = x3
                return LeukemiaModel.prolif_rate(xx, theta0)

            # a root exists iff the drug effect can exceed the feedback gain
            if theta0[5] <= gain:
                continue
            root = brentq(net, 1e-12, 1e9)
            assert net(root * 0.5) > 0.0
            assert net(root * 2.0) < 0.0

    def test_positivity_for_arbitrary_finite_input(self, calibrated_model, theta0, rng):
        for _ in range(20):
            x = rng.uniform(-1e9, 1e11, size=8)
            x = np.abs(x) + 1e-9
            d = rng.normal(scale=1e9, size=8)
            out = calibrated_model.step(x, rng.uniform(0, calibrated_model.u_max), d, theta0)
            assert np.all(out > 0.0)

    def test_nonfinite_rejected(self, calibrated_model, theta0, x0):
        with pytest.raises(ValueError):
            calibrated_model.step(np.full(8, np.nan), 0.0, None, theta0)
        with pytest.raises(ValueError):
            calibrated_model.step(x0, np.inf, None, theta0)


class TestLeukemiaOutput:
    def test_tabulated_point(self, calibrated_model):
        x = X0_DEFAULT.copy()
        th = THETA0_DEFAULT.copy()
        np.testing.assert_allclose(calibrated_model.output(x, th), [2.85e9, 1.425e9])

    def test_zero_state(self, calibrated_model, theta0):
        x = np.zeros(8)
        np.testing.assert_array_equal(calibrated_model.output(x, theta0), [0.0, 0.0])

    def test_output_dtheta_single_entry(self, calibrated_model, theta0, rng):
        x = random_state(rng)
        j = calibrated_model.output_dtheta(x, theta0)
        expected = np.zeros((2, 8))
        expected[1, 7] = x[7]
        np.testing.assert_array_equal(j, expected)


class TestJacobians:
    """All four Jacobians against central finite differences (rel err < 1e-5)."""

    N_POINTS = 100

    def _points(self, rng):
        for _ in range(self.N_POINTS):
            yield (random_state(rng), rng.uniform(0.0, 173.0),
                   rng.normal(scale=1e-3 * X_TYPICAL), random_theta(rng, THETA0_DEFAULT))

    def test_step_dx(self, calibrated_model, rng):
        m = calibrated_model
        for x, u, d, th in self._points(rng):
            fd = fd_jacobian(lambda xx: m.step(xx, u, d, th), x, 6e-6 * np.abs(x))
            assert rel_err(m.step_dx(x, u, d, th), fd) < 1e-5

    def test_step_dtheta(self, calibrated_model, rng):
        m = calibrated_model
        for x, u, d, th in self._points(rng):
            fd = fd_jacobian(lambda tt: m.step(x, u, d, tt), th, 6e-6 * th)
            assert rel_err(m.step_dtheta(x, u, d, th), fd) < 1e-5

    def test_output_dx(self, calibrated_model, rng):
        m = calibrated_model
        for x, _, _, th in self._points(rng):
            fd = fd_jacobian(lambda xx: m.output(xx, th), x, 6e-6 * np.abs(x))
            assert rel_err(m.output_dx(x, th), fd) < 1e-5

    def test_output_dtheta(self, calibrated_model, rng):
        m = calibrated_model
        for x, _, _, th in self._points(rng):
            fd = fd_jacobian(lambda tt: m.output(x, tt), th, 6e-6 * th)
            assert rel_err(m.output_dtheta(x, th), fd) < 1e-5


class TestCalibration:
    def test_plugback_tabulated(self, x0, theta0):
        rates = calibrate_equilibrium(x0, theta0)
        m = LeukemiaModel(rates=rates)
        fb = m.drift(x0, 0.0, theta0)
        assert np.linalg.norm(fb) <= 1e-8 * np.linalg.norm(x0)
        k = rates.k_transit
        assert k[0] == k[1] == k[2] == k[3]
        assert rates.k_death == pytest.approx(rates.kappa_vol * k[3] * x0[6] / x0[7])

    def test_rows_with_empty_drug_compartments_vanish(self, x0, theta0, rng):
        rates = calibrate_equilibrium(x0, theta0,
                                      base=RateBlock(k_absorb=rng.uniform(0.1, 10)))
        m = LeukemiaModel(rates=rates)
        fb = m.drift(x0, 0.0, theta0)
        np.testing.assert_allclose(fb[:3], 0.0, atol=1e-30)

    def test_perturbed_equilibrium_distinct_rates(self, x0, theta0):
        xp = x0.copy()
        xp[4] = 0.8e11
        xp[5] = 1.5e11
        rates = calibrate_equilibrium(xp, theta0)
        k = rates.k_transit
        assert len(set(np.round(k, 12))) > 1
        m = LeukemiaModel(rates=rates)
        fb = m.drift(xp, 0.0, theta0)
        assert np.linalg.norm(fb) <= 1e-8 * np.linalg.norm(xp)

    def test_inconsistent_state_raises(self, theta0):
        bad = X0_DEFAULT.copy()
        bad[3] = 0.0
        with pytest.raises(CalibrationError):
            calibrate_equilibrium(bad, theta0)


class TestNoiseModel:
    def test_measurement_covariance_must_be_pd(self):
        with pytest.raises(ValueError):
            NoiseModel(sigma_d=np.eye(2), sigma_w=np.zeros((2, 2)))

    def test_singular_process_covariance_allowed(self, rng):
        nm = NoiseModel.diagonal([0.0, 1.0], [1.0])
        draws = nm.sample_process(rng, size=1000)
        assert np.all(draws[:, 0] == 0.0)
        assert draws[:, 1].std() == pytest.approx(1.0, rel=0.1)

    def test_joint_marginal_consistency(self, rng):
        # with independent blocks, the w-marginal of the joint equals rho
        nm = NoiseModel.diagonal([1.0, 2.0], [3.0])
        _, w = nm.sample_joint(rng, size=4000)
        assert w.std() == pytest.approx(3.0, rel=0.1)

    def test_logpdf_mode_value(self):
        nm = NoiseModel.diagonal([1.0], [2.0, 0.5])
        expected = -0.5 * (2 * np.log(2 * np.pi) + np.log(np.linalg.det(np.diag([4.0, 0.25]))))
        assert nm.logpdf_measure(np.zeros(2)) == pytest.approx(expected, rel=1e-12)
