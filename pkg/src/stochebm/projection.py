"""Posterior-predictive projections of the real world and their summaries."""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .ebm import EbmParams, build_extended_system, DEFAULT_P0_DELTA
from .exceptions import NumericalError, ValidationError
from .kalman import kalman_filter, ffbs_sample
from .validation import check_random_state

VARIABLES = ("T1", "N")
QUANTILE_LEVELS = (0.05, 0.25, 0.5, 0.75, 0.95)
MAX_SKIP_FRACTION = 1e-3


@dataclass
class ProjectionEnsemble:
    """Sampled trajectories of ``(T1, N)``.

    ``samples`` has shape ``(S, T, 2)``; ``provenance`` records, per sample,
    the posterior draw index and the RNG stream id that produced it.
    """

    times: np.ndarray
    samples: np.ndarray
    provenance: np.ndarray = None
    n_skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.times = np.asarray(self.times)
        if self.samples.ndim != 3 or self.samples.shape[1] != self.times.shape[0]:
            raise ValidationError("samples must be (S, T, q) with one column per time")
        if self.provenance is None:
            s = self.samples.shape[0]
            self.provenance = np.column_stack([np.arange(s), np.zeros(s, dtype=int)])

    @property
    def n_samples(self):
        return self.samples.shape[0]

    def mean(self):
        return self.samples.mean(axis=0)

    def sd(self):
        return self.samples.std(axis=0, ddof=1)

    def quantiles(self, levels=QUANTILE_LEVELS, variable=0):
        """``(len(levels), T)`` type-7 quantiles of one variable."""
        return np.quantile(self.samples[:, :, variable], levels, axis=0)

    def window(self, start_year, end_year):
        sel = (self.times >= start_year) & (self.times <= end_year)
        return sel


def _draw_arrays(posterior):
    theta_z = np.asarray(posterior.flat("log_theta_Z"))
    nu = np.asarray(posterior.flat("nu"))
    return theta_z, nu


def project_real_world(posterior, obs, future_forcing, rng=None, p0_delta=DEFAULT_P0_DELTA,
                       obs_noise_sd=0.0, history=None, variance_floor=1e-10):
    """Sample future ``(T1, N)`` for the real world, one trajectory per
    retained posterior draw.

    For each draw the extended filter runs over the observed period with the
    draw's parameters and shared discrepancy; the terminal state is drawn
    from its filtered distribution and propagated forward with zero volcanic
    forcing. ``history`` set to ``"state"`` or ``"observed"`` also returns a
    smoothing draw of the observed period, the latter with observation noise
    added to ``T1``.

    ``posterior`` is anything with a ``flat(name)`` accessor returning stacked
    draws (a ``ChainOutput``).
    """
    rng = check_random_state(rng)
    if history not in (None, "state", "observed"):
        raise ValidationError("history must be None, 'state' or 'observed'")
    if np.any(future_forcing.f_V != 0):
        raise ValidationError("volcanic forcing must be zero over the projection period")
    theta_z, nu = _draw_arrays(posterior)
    tau_h = len(obs.obs)
    t_fut = len(future_forcing)
    if nu.shape[1] < tau_h + t_fut:
        raise ValidationError(
            f"posterior nu covers {nu.shape[1]} years, need {tau_h + t_fut}")
    n_draws = theta_z.shape[0]
    streams = np.random.SeedSequence(int(rng.integers(2**63))).spawn(n_draws)
    t_out = t_fut + (tau_h if history else 0)
    out = np.full((n_draws, t_out, 2), np.nan)
    keep = np.ones(n_draws, dtype=bool)
    hist_in = obs.forcing.extended_inputs(np.zeros(tau_h))
    fut_in = future_forcing.extended_inputs(np.zeros(t_fut))
    fut_in[:, 1] = 0.0
    cache = {}
    for i in range(n_draws):
        g = np.random.Generator(np.random.Philox(streams[i]))
        key = (theta_z[i].tobytes(), nu[i, :tau_h + t_fut].tobytes())
        try:
            if key in cache:
                ssm, filt = cache[key]
            else:
                theta = EbmParams.from_log(theta_z[i])
                ssm = build_extended_system(theta, p0_delta=p0_delta, variance_floor=variance_floor)
                filt = None
                if tau_h:
                    hist_in[:, 2] = nu[i, :tau_h]
                    filt = kalman_filter(ssm, hist_in, obs.obs)
                    if not np.all(np.isfinite(filt.filt_mean)):
                        raise NumericalError("non-finite filtered state")
                cache = {key: (ssm, filt)}
            if history and tau_h:
                path = ffbs_sample(filt, ssm, g)
                y_hist = path @ ssm.H_d.T
                if history == "observed":
                    sd = np.sqrt(np.maximum(obs.obs.noise[:, 0, 0], 0.0))
                    y_hist[:, 0] += sd * g.standard_normal(tau_h)
                out[i, :tau_h] = y_hist
                x_start = path[-1]
            elif tau_h:
                lf = np.empty((5, 5))
                K.psd_factor(np.ascontiguousarray(filt.filt_cov[-1]), lf)
                x_start = filt.filt_mean[-1] + lf @ g.standard_normal(5)
            else:
                lf = np.empty((5, 5))
                K.psd_factor(ssm.P0, lf)
                x_start = ssm.m0 + lf @ g.standard_normal(5)
            fut_in[:, 2] = nu[i, tau_h:tau_h + t_fut]
            bu = np.ascontiguousarray(fut_in @ ssm.B_d.T)
            lq = np.empty((5, 5))
            K.psd_factor(ssm.Q_d, lq)
            lr = np.zeros((t_fut, 2, 2))
            lr[:, 0, 0] = obs_noise_sd
            zw = g.standard_normal((1, t_fut, 5))
            zv = g.standard_normal((1, t_fut, 2))
            _, ys = K.simulate_kernel(ssm.A_d, bu, lq, ssm.H_d, lr, x_start[None, :], zw, zv)
            out[i, t_out - t_fut:] = ys[0]
        except (NumericalError, ValidationError, np.linalg.LinAlgError):
            keep[i] = False
    n_skipped = int((~keep).sum())
    if n_skipped > MAX_SKIP_FRACTION * n_draws:
        raise NumericalError(f"{n_skipped} of {n_draws} projection draws failed",
                             n_skipped=n_skipped)
    fut_times = np.asarray(future_forcing.times)
    times = np.concatenate([np.asarray(obs.forcing.times), fut_times]) if history else fut_times
    prov = np.column_stack([np.arange(n_draws), np.arange(n_draws)])[keep]
    return ProjectionEnsemble(times, out[keep], prov, n_skipped,
                              meta={"history": history, "tau_H": tau_h})


def _window_mean(values, times, window, name):
    lo, hi = window
    sel = (np.asarray(times) >= lo) & (np.asarray(times) <= hi)
    if not sel.any():
        raise ValidationError(f"{name} window {window} contains no years")
    return values[..., sel].mean(axis=-1)


def summarize(samples, levels=QUANTILE_LEVELS):
    samples = np.asarray(samples, dtype=np.float64)
    qs = np.quantile(samples, levels)
    return {"mean": float(samples.mean()), "median": float(np.median(samples)),
            "quantiles": {float(l): float(q) for l, q in zip(levels, qs)},
            "n": int(samples.size)}


def anomaly_stats(ens, window, reference, reference_series=None, reference_times=None,
                  variable=0, levels=QUANTILE_LEVELS):
    """Distribution of window-mean minus reference-mean per sample.

    The reference mean comes from ``reference_series`` when given (1-D,
    shared by all samples, or 2-D per sample), otherwise from the ensemble
    itself.
    """
    vals = ens.samples[:, :, variable]
    win = _window_mean(vals, ens.times, window, "projection")
    if reference_series is None:
        ref = _window_mean(vals, ens.times, reference, "reference")
    else:
        rs = np.asarray(reference_series, dtype=np.float64)
        rt = ens.times if reference_times is None else reference_times
        ref = _window_mean(rs, rt, reference, "reference")
    out = summarize(win - ref, levels)
    out["samples"] = win - ref
    return out


def exceedance_curve(ens, threshold, offset=0.0, variable=0):
    """Per-year fraction of samples whose anomaly above ``offset`` exceeds
    ``threshold`` (raw empirical fractions)."""
    if not threshold > 0:
        raise ValidationError("threshold must be positive")
    vals = ens.samples[:, :, variable] - offset
    return (vals > threshold).mean(axis=0)


def ecs_posterior(posterior, population="real_world", rng=None):
    """ECS samples ``F_C / k1``.

    ``real_world`` uses the real-world parameter draws; ``new_model`` draws
    a fresh log-parameter vector from ``N(mu, Sigma)`` per hyperparameter
    draw.
    """
    from .ebm import PARAM_NAMES

    i_fc, i_k1 = PARAM_NAMES.index("F_C"), PARAM_NAMES.index("k1")
    if population == "real_world":
        lt = np.asarray(posterior.flat("log_theta_Z"))
        return np.exp(lt[:, i_fc] - lt[:, i_k1])
    if population == "new_model":
        rng = check_random_state(rng)
        mu = np.asarray(posterior.flat("mu"))
        sig = np.asarray(posterior.flat("Sigma"))
        out = np.empty(mu.shape[0])
        for i in range(mu.shape[0]):
            sub = [i_fc, i_k1]
            m2 = mu[i, sub]
            s2 = sig[i][np.ix_(sub, sub)]
            lf = np.empty((2, 2))
            K.psd_factor(np.ascontiguousarray(s2), lf)
            d = m2 + lf @ rng.standard_normal(2)
            out[i] = np.exp(d[0] - d[1])
        return out
    raise ValidationError("population must be 'real_world' or 'new_model'")


def quantile_table(ens, levels=QUANTILE_LEVELS, variable=0):
    """Rows of ``(year, q05, ..., q95)`` for CSV output."""
    qs = ens.quantiles(levels, variable)
    return np.column_stack([ens.times, qs.T])
