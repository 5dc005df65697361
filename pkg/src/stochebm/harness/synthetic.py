"""Synthetic perfect-model ensembles drawn from the hierarchical model."""
from dataclasses import dataclass, field

import numpy as np

from ..ebm import (N_PARAMS, EbmParams, ForcingSeries, ScenarioData, build_basic_system,
                   build_extended_system, simulate)
from ..exceptions import NumericalError, ValidationError
from ..hier.state import EnsembleData, MemberData
from ..kalman import ObservationSeries
from ..validation import check_random_state

ABRUPT_FACTOR = 2.0


def synthetic_forcing(tau_H, tau_F, start_year=1850, final_factor=1.6, rng=None,
                      n_eruptions=None):
    """Smooth CO2-equivalent ramp with episodic volcanic AOD in the
    historical period and none afterwards.

    The log2 concentration factor rises quadratically to ~0.6 at ``tau_H``
    and then linearly towards ``final_factor``.
    """
    rng = check_random_state(rng)
    t = np.arange(tau_F, dtype=np.float64)
    hist = 0.6 * (t[:tau_H] / max(tau_H, 1)) ** 2
    slope = (final_factor - 0.6) / max(tau_F - tau_H, 1)
    fut = 0.6 + slope * (t[tau_H:] - tau_H + 1)
    f_c = np.concatenate([hist, fut])
    f_v = np.zeros(tau_F)
    n_eruptions = max(1, tau_H // 25) if n_eruptions is None else n_eruptions
    if tau_H > 2:
        for _ in range(n_eruptions):
            t0 = int(rng.integers(0, tau_H - 1))
            peak = float(rng.uniform(0.02, 0.12))
            span = np.arange(t0, tau_H)
            f_v[span] += peak * np.exp(-(span - t0) / 1.5)
    return ForcingSeries(f_c, f_v, times=start_year + np.arange(tau_F))


@dataclass
class SyntheticTruth:
    """Ground truth of a synthetic ensemble (log-scale parameters)."""

    mu: np.ndarray
    Sigma: np.ndarray
    sigma_nu: float
    log_theta: np.ndarray
    log_theta_Z: np.ndarray
    nu: np.ndarray
    delta: np.ndarray
    delta_Z: np.ndarray
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"mu": self.mu.tolist(), "Sigma": self.Sigma.tolist(),
                "sigma_nu": self.sigma_nu, "log_theta": self.log_theta.tolist(),
                "log_theta_Z": self.log_theta_Z.tolist(), "nu": self.nu.tolist(),
                "delta": self.delta.tolist(), "delta_Z": self.delta_Z.tolist(),
                "meta": self.meta}


def _draw_params(mu, chol, rng, max_tries=100, check=None):
    for _ in range(max_tries):
        lt = mu + chol @ rng.standard_normal(N_PARAMS)
        try:
            theta = EbmParams.from_log(lt)
            build_extended_system(theta)
            if check is None or check(theta):
                return lt
        except (NumericalError, ValidationError):
            continue
    raise NumericalError("could not draw a stable parameter vector")


def _simulate_extended(lt, forcing, nu, rng):
    ssm = build_extended_system(EbmParams.from_log(lt))
    sim = simulate(ssm, forcing.extended_inputs(nu), rng, obs_noise=False)
    return sim.states, sim.obs


def _simulate_abrupt(lt, t_len, rng):
    ssm = build_basic_system(EbmParams.from_log(lt[:11]))
    sim = simulate(ssm, np.full((t_len, 1), ABRUPT_FACTOR), rng, obs_noise=False)
    return sim.obs


def generate_ensemble(mu, Sigma, sigma_nu, n_members, forcing, tau_H, abrupt_len=150,
                      obs_sd=0.1, kappa=1.0, rng=None, labels=None, zero_variability=False,
                      nu_drift=0.0):
    """Draw members and a real world from the hierarchical model.

    Parameters
    ----------
    mu, Sigma : log-scale population mean and covariance.
    sigma_nu : shared-increment SD (W m^-2).
    forcing : ForcingSeries spanning ``tau_F`` years.
    obs_sd : real-world ``T1`` measurement SD (K); ``N`` is unobserved.
    zero_variability : if True, ``sigma_F``, ``sigma_T`` and ``sigma_delta``
        of every draw are forced to ~0.
    nu_drift : constant added to every shared increment, giving every
        discrepancy path a linear ramp.

    Returns
    -------
    data : EnsembleData
    truth : SyntheticTruth
    """
    rng = check_random_state(rng)
    mu = np.asarray(mu, dtype=np.float64)
    chol = np.linalg.cholesky(np.asarray(Sigma, dtype=np.float64))
    tau_F = len(forcing)
    labels = labels or [f"model{i + 1:02d}" for i in range(n_members)]
    nu = sigma_nu * rng.standard_normal(tau_F) + nu_drift
    members = []
    lts = np.empty((n_members, N_PARAMS))
    deltas = np.empty((n_members, tau_F))
    quiet = np.log(1e-12)
    for m in range(n_members):
        lt = _draw_params(mu, chol, rng)
        if zero_variability:
            lt[[8, 9, 12]] = quiet
        lts[m] = lt
        states, y = _simulate_extended(lt, forcing, nu, rng)
        deltas[m] = states[:, 4]
        scen = ScenarioData(labels[m], ObservationSeries(y, times=forcing.times), forcing,
                            tau_H=tau_H)
        abrupt = None
        if abrupt_len:
            ya = _simulate_abrupt(lt, abrupt_len, rng)
            abrupt = ScenarioData(labels[m] + "-abrupt", ObservationSeries(ya),
                                  ForcingSeries(np.full(abrupt_len, ABRUPT_FACTOR)))
        members.append(MemberData(labels[m], scen, abrupt))
    lz = _draw_params(mu, kappa * chol, rng)
    if zero_variability:
        lz[[8, 9, 12]] = quiet
    states, y = _simulate_extended(lz, forcing, nu, rng)
    t1 = y[:tau_H, 0] + obs_sd * rng.standard_normal(tau_H)
    obs = np.column_stack([t1, np.full(tau_H, np.nan)])
    noise = np.zeros((tau_H, 2, 2))
    noise[:, 0, 0] = obs_sd ** 2
    hist = forcing.slice(0, tau_H)
    real = ScenarioData("real_world", ObservationSeries(obs, noise=noise, times=hist.times), hist)
    data = EnsembleData(members, real, tau_F)
    truth = SyntheticTruth(mu, np.asarray(Sigma), float(sigma_nu), lts, lz, nu, deltas,
                           states[:, 4], meta={"real_world_future": y[tau_H:].tolist(),
                                               "real_world_full": y.tolist()})
    return data, truth
