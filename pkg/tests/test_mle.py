import numpy as np
import pytest
from sklearn.exceptions import NotFittedError

from stochebm.ebm import (N_BASIC, ForcingSeries, ScenarioData, build_basic_system, simulate,
                          table2_params)
from stochebm.exceptions import ValidationError
from stochebm.kalman import ObservationSeries
from stochebm.mle import (AbruptEbmMLE, MleFit, abrupt_loglik, covariance_from_hessian,
                          fit_abrupt, numerical_hessian, project_mle, standardised_errors)
from stochebm.projection import ProjectionEnsemble

TINY = 1e-200


def abrupt_data(theta, t_len, seed):
    ssm = build_basic_system(theta)
    rng = np.random.Generator(np.random.Philox(seed))
    sim = simulate(ssm, np.full((t_len, 1), 2.0), rng, obs_noise=False)
    return ScenarioData("abrupt", ObservationSeries(sim.obs), ForcingSeries(np.full(t_len, 2.0)))


@pytest.fixture(scope="module")
def hadgem_fit():
    theta = table2_params("HadGEM2-ES")
    data = abrupt_data(theta, 150, 11)
    est = AbruptEbmMLE(n_restarts=2, random_state=0).fit(data)
    return theta, data, est


class TestFit:
    def test_maximum_beats_truth(self, hadgem_fit):
        theta, data, est = hadgem_fit
        truth = abrupt_loglik(np.log(theta.basic_subset()), data)
        assert est.loglik_ >= truth
        assert est.converged_

    def test_covariance_is_pd(self, hadgem_fit):
        cov = hadgem_fit[2].log_theta_cov_
        np.testing.assert_array_equal(cov, cov.T)
        assert np.linalg.eigvalsh(cov).min() > 0

    def test_score_is_loglik(self, hadgem_fit):
        _, data, est = hadgem_fit
        assert est.score(data) == pytest.approx(est.loglik_, abs=1e-9)

    def test_degenerate_series_not_converged(self):
        data = ScenarioData("flat", ObservationSeries(np.zeros((30, 2))),
                            ForcingSeries(np.full(30, 2.0)))
        fit = fit_abrupt(data, n_restarts=1, maxfev=3000)
        assert not fit.converged
        assert np.all(np.isfinite(fit.log_theta_cov))


class TestEstimator:
    def test_params_round_trip(self):
        est = AbruptEbmMLE(n_restarts=3, random_state=4)
        params = est.get_params()
        assert params["n_restarts"] == 3 and params["random_state"] == 4
        assert est.set_params(maxfev=10).maxfev == 10

    def test_predict_before_fit(self):
        with pytest.raises(NotFittedError):
            AbruptEbmMLE().predict(ForcingSeries(np.zeros(3)))

    def test_predict_shape_and_seed(self, hadgem_fit):
        est = hadgem_fit[2]
        f = ForcingSeries(np.linspace(0, 1, 20))
        a = est.predict(f, n_samples=50, random_state=3)
        b = est.predict(f, n_samples=50, random_state=3)
        assert a.samples.shape == (50, 20, 2)
        np.testing.assert_array_equal(a.samples, b.samples)


class TestHessian:
    def test_quadratic(self):
        m = np.array([[2.0, 0.5], [0.5, 1.0]])
        h = numerical_hessian(lambda x: 0.5 * x @ m @ x, np.array([0.3, -0.2]))
        np.testing.assert_allclose(h, m, atol=1e-6)

    def test_indefinite_projected(self):
        cov, pd = covariance_from_hessian(np.diag([2.0, -1.0]))
        assert not pd
        assert np.linalg.eigvalsh(cov).min() > 0
        assert cov[0, 0] == pytest.approx(0.5)


def quiet_fit():
    theta = table2_params("HadGEM2-ES").replace(sigma_F=TINY, sigma_T=TINY)
    return MleFit(theta, np.zeros((N_BASIC, N_BASIC)), 0.0)


class TestProjection:
    def test_deterministic_without_uncertainty(self):
        f = ForcingSeries(np.linspace(0, 2, 30))
        ens = project_mle(quiet_fit(), f, 5, rng=0)
        theta = quiet_fit().theta_hat
        ref = simulate(build_basic_system(theta, m0=np.zeros(4)), f.basic_inputs(),
                       x0=np.zeros(4)).obs
        for s in range(5):
            np.testing.assert_allclose(ens.samples[s], ref, atol=1e-12)
        np.testing.assert_allclose(ens.sd(), 0.0, atol=1e-12)

    def test_rerun_bit_identical(self, hadgem_fit):
        f = ForcingSeries(np.linspace(0, 2, 30))
        fit = hadgem_fit[2].fit_
        a = project_mle(fit, f, 20, rng=np.random.Generator(np.random.Philox(8)))
        b = project_mle(fit, f, 20, rng=np.random.Generator(np.random.Philox(8)))
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_calibrated_coverage(self, hadgem_fit):
        fit = hadgem_fit[2].fit_
        f = ForcingSeries(np.linspace(0, 2, 40))
        ens = project_mle(fit, f, 2000, rng=np.random.Generator(np.random.Philox(1)))
        truths = project_mle(fit, f, 300, rng=np.random.Generator(np.random.Philox(2)))
        z = np.stack([standardised_errors(y, ens) for y in truths.samples])
        inside = np.mean(np.abs(z) <= 2)
        assert 0.93 <= inside <= 0.97
        assert 0.9 <= z.var() <= 1.1


class TestStandardisedErrors:
    def ens(self):
        s = np.array([[[1.0, 0.0]], [[3.0, 0.0]]])
        return ProjectionEnsemble(np.array([2000]), s)

    def test_example(self):
        # mean 2, sd sqrt(2)
        z = standardised_errors(np.array([[2.0 + np.sqrt(2.0), 0.0]]), self.ens())
        assert z[0, 0] == pytest.approx(1.0)
        assert z[0, 1] == 0.0

    def test_zero_spread_flags(self):
        z, flag = standardised_errors(np.array([[2.0, 0.5]]), self.ens(), return_flag=True)
        assert flag
        assert z[0, 1] == np.inf

    def test_missing_truth(self):
        z = standardised_errors(ObservationSeries([[np.nan, 0.0]]), self.ens())
        assert np.isnan(z[0, 0])

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            standardised_errors(np.zeros((2, 2)), self.ens())
