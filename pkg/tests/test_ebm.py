import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import linear_ode_step
from stochebm.ebm import (N_BASIC, PARAM_NAMES, TABLE2, EbmParams, ForcingSeries, ScenarioData,
                          build_basic_system, build_extended_system, co2_forcing_factor,
                          continuous_basic, continuous_extended, ecs, simulate, table2_params)
from stochebm.exceptions import ValidationError
from stochebm.kalman import ObservationSeries, kalman_filter

TINY = 1e-200


@pytest.fixture
def hadgem():
    return table2_params("HadGEM2-ES")


def quiet(theta):
    return theta.replace(sigma_F=TINY, sigma_T=TINY, sigma_delta=TINY)


def moment_sequences(ssm, inputs):
    t_len = inputs.shape[0]
    res = kalman_filter(ssm, inputs, ObservationSeries(np.full((t_len, 2), np.nan)))
    return res.obs_mean, res.obs_cov


class TestParams:
    def test_basic_subset(self, hadgem):
        assert hadgem.basic_subset() == tuple(TABLE2["HadGEM2-ES"][:N_BASIC])
        assert len(PARAM_NAMES) == 13

    def test_positive(self, hadgem):
        with pytest.raises(ValidationError):
            hadgem.replace(k1=0.0)
        with pytest.raises(ValidationError):
            hadgem.replace(C1=np.nan)

    def test_log_round_trip(self, hadgem):
        back = EbmParams.from_log(hadgem.to_log())
        np.testing.assert_allclose(back.to_array(), hadgem.to_array(), rtol=1e-15)

    def test_basic_only_params(self):
        theta = EbmParams(*TABLE2["Ensemble"][:N_BASIC])
        assert not theta.is_extended
        with pytest.raises(ValidationError):
            build_extended_system(theta)


class TestForcing:
    @pytest.mark.parametrize("ratio, factor", [(1.0, 0.0), (2.0, 1.0), (4.0, 2.0)])
    def test_co2_factor(self, ratio, factor):
        assert co2_forcing_factor(ratio) == pytest.approx(factor, abs=1e-15)

    def test_co2_factor_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            co2_forcing_factor(0.0)
        with pytest.raises(ValidationError):
            co2_forcing_factor([1.0, -2.0])

    def test_series_alignment(self):
        with pytest.raises(ValidationError):
            ForcingSeries([1.0, 2.0], [0.0])
        with pytest.raises(ValidationError):
            ForcingSeries([1.0, np.nan])

    def test_scenario_split(self):
        f = ForcingSeries(np.zeros(5))
        with pytest.raises(ValidationError):
            ScenarioData("x", ObservationSeries(np.zeros((4, 2))), f)
        with pytest.raises(ValidationError):
            ScenarioData("x", ObservationSeries(np.zeros((5, 2))), f, tau_H=6)


class TestBasicSystem:
    def test_drift_entry(self, hadgem):
        a = continuous_basic(hadgem).A
        assert a[1, 1] == pytest.approx(-(0.62 + 2.34) / 4.13, abs=1e-12)
        assert a[1, 1] == pytest.approx(-0.71671, abs=1e-5)

    def test_noise_uses_capacity_scaling(self, hadgem):
        q = continuous_basic(hadgem).Q
        assert q[1, 1] == pytest.approx((0.40 / 4.13) ** 2)
        assert q[0, 0] == pytest.approx(0.60 ** 2)

    def test_unit_efficacy_row(self, hadgem):
        ssm = build_basic_system(hadgem.replace(epsilon=1.0))
        np.testing.assert_array_equal(ssm.H_d[1], [1.0, -hadgem.k1, 0.0, 0.0])

    def test_efficacy_row(self, hadgem):
        ssm = build_basic_system(hadgem)
        d = (1 - 1.37) * 0.66
        np.testing.assert_allclose(ssm.H_d, [[0, 1, 0, 0], [1, -0.62, d, -d]], atol=1e-15)

    def test_initial_radiation_equals_forcing(self, hadgem):
        ssm = build_basic_system(hadgem)
        np.testing.assert_allclose(ssm.H_d @ ssm.m0, [0.0, 2 * hadgem.F_C], atol=1e-15)
        np.testing.assert_array_equal(ssm.R_d, np.zeros((2, 2)))

    def test_stationary_initial_covariance(self, hadgem):
        ssm = build_basic_system(hadgem)
        p = ssm.P0
        assert np.abs(p - ssm.A_d @ p @ ssm.A_d.T - ssm.Q_d).max() < 1e-10

    def test_abrupt_trajectory_matches_ode(self, hadgem):
        theta = quiet(hadgem)
        ssm = build_basic_system(theta)
        sim = simulate(ssm, np.full((5, 1), 2.0), x0=ssm.m0)
        c = continuous_basic(theta)
        x = ssm.m0.copy()
        for t in range(5):
            x = linear_ode_step(c.A, c.B, np.array([2.0]), x)
            np.testing.assert_allclose(sim.states[t], x, rtol=0, atol=1e-8)


class TestExtendedSystem:
    def test_structure(self, hadgem):
        c = continuous_extended(hadgem)
        np.testing.assert_array_equal(c.A[4], np.zeros(5))
        assert c.B[0, 0] == pytest.approx(hadgem.gamma * hadgem.F_C)
        assert c.B[0, 1] == pytest.approx(-hadgem.gamma * hadgem.F_V)
        np.testing.assert_array_equal(c.B[4], [0, 0, 1])
        assert c.Q[4, 4] == pytest.approx(hadgem.sigma_delta ** 2)
        ssm = build_extended_system(hadgem, p0_delta=0.3)
        assert ssm.P0[4, 4] == 0.3
        np.testing.assert_array_equal(ssm.P0[4, :4], 0)
        np.testing.assert_array_equal(ssm.m0, np.zeros(5))
        assert np.all(np.isfinite(ssm.B_d))

    def test_discrepancy_enters_temperature_and_radiation(self, hadgem):
        c = continuous_extended(hadgem)
        assert c.A[1, 4] == pytest.approx(1 / hadgem.C1)
        ssm = build_extended_system(hadgem)
        assert ssm.H_d[1, 4] == 1.0

    def test_reduces_to_basic(self, hadgem):
        theta = hadgem.replace(sigma_delta=TINY)
        basic = build_basic_system(theta, m0=np.zeros(4))
        ext = build_extended_system(theta, p0_delta=0.0)
        rng = np.random.default_rng(1)
        f_c = np.cumsum(rng.uniform(0, 0.02, 200))
        mb, cb = moment_sequences(basic, f_c[:, None])
        me, ce = moment_sequences(ext, np.column_stack([f_c, np.zeros(200), np.zeros(200)]))
        np.testing.assert_allclose(me, mb, rtol=0, atol=1e-8)
        np.testing.assert_allclose(ce, cb, rtol=0, atol=1e-8)

    def test_volcanic_impulse_cools(self, hadgem):
        theta = quiet(hadgem)
        ssm = build_extended_system(theta, p0_delta=0.0)
        sim = simulate(ssm, [[0.0, 1.0, 0.0]], x0=np.zeros(5))
        c = continuous_extended(theta)
        ref = linear_ode_step(c.A, c.B, np.array([0.0, 1.0, 0.0]), np.zeros(5))
        n1 = sim.obs[0, 1]
        assert n1 < 0
        np.testing.assert_allclose(sim.states[0], ref, atol=1e-8)
        # the forcing state relaxes towards -F_V at rate gamma
        assert sim.states[0, 0] == pytest.approx(-14.8 * (1 - np.exp(-1.96)), rel=1e-3)

    def test_constant_discrepancy_cancels_in_radiation(self, hadgem):
        theta = quiet(hadgem)
        d = 0.8
        ssm = build_extended_system(theta, p0_delta=0.0)
        x = np.array([0.0, 0.0, 0.0, 0.0, d])
        ad_n = np.linalg.matrix_power(ssm.A_d, 20000)
        x_eq = ad_n @ x
        y = ssm.H_d @ x_eq
        assert y[0] == pytest.approx(d / theta.k1, rel=1e-9)
        assert y[1] == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_response_is_linear_in_forcing(seed):
    rng = np.random.default_rng(seed)
    theta = quiet(table2_params(list(TABLE2)[seed % len(TABLE2)]))
    ssm = build_extended_system(theta, p0_delta=0.0)
    f1 = rng.uniform(0, 1, (30, 3))
    f2 = rng.uniform(0, 1, (30, 3))
    run = lambda f: simulate(ssm, f, x0=np.zeros(5)).obs
    np.testing.assert_allclose(run(f1 + f2), run(f1) + run(f2), atol=1e-10)


class TestSimulate:
    def test_silent_system(self, hadgem):
        ssm = build_basic_system(quiet(hadgem), m0=np.zeros(4))
        sim = simulate(ssm, np.zeros((20, 1)), x0=np.zeros(4))
        np.testing.assert_array_equal(sim.obs, 0.0)

    def test_first_step_covariance(self, hadgem):
        ssm = build_basic_system(hadgem)
        rng = np.random.Generator(np.random.Philox(99))
        sim = simulate(ssm, np.full((1, 1), 2.0), rng, size=10_000)
        y = sim.obs[:, 0, :]
        target = ssm.H_d @ (ssm.A_d @ ssm.P0 @ ssm.A_d.T + ssm.Q_d) @ ssm.H_d.T
        c = y - y.mean(axis=0)
        prod = c[:, :, None] * c[:, None, :]
        se = prod.std(axis=0, ddof=1) / np.sqrt(y.shape[0])
        assert np.all(np.abs(prod.mean(axis=0) - target) < 5 * se)

    def test_seeded(self, hadgem):
        ssm = build_extended_system(hadgem)
        f = np.ones((10, 3))
        a = simulate(ssm, f, np.random.Generator(np.random.Philox(3)), size=2)
        b = simulate(ssm, f, np.random.Generator(np.random.Philox(3)), size=2)
        np.testing.assert_array_equal(a.obs, b.obs)


class TestEcs:
    def test_unit(self, hadgem):
        assert ecs(hadgem.replace(F_C=hadgem.k1)) == 1.0

    def test_table_rows(self):
        assert ecs(table2_params("HadGEM2-ES")) == pytest.approx(5.16, abs=0.005)
        assert ecs(table2_params("Observations")) == pytest.approx(3.07, abs=0.005)

    @settings(max_examples=30)
    @given(st.floats(0.01, 100))
    def test_joint_scaling(self, c):
        theta = table2_params("Ensemble")
        scaled = theta.replace(F_C=c * theta.F_C, k1=c * theta.k1)
        assert ecs(scaled) == pytest.approx(ecs(theta), rel=1e-14)
