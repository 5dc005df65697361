"""Kalman filtering with missing observations and forward-filtering
backward-sampling (FFBS) of state trajectories."""
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .exceptions import ValidationError
from .validation import check_array, check_random_state

FFBS_RIDGE = 1e-12


@dataclass
class ObservationSeries:
    """Annual observations with missing entries.

    Parameters
    ----------
    values : array (T, q)
        Observed values; NaN marks a missing entry unless ``missing`` is given.
    missing : bool array (T, q), optional
        Explicit missing markers. A NaN at a position marked observed is an
        error.
    noise : array (q, q) or (T, q, q), optional
        Observation noise covariance per time; zero if omitted.
    times : array (T,), optional
        Calendar years, for bookkeeping only.
    """

    values: np.ndarray
    missing: np.ndarray = None
    noise: np.ndarray = None
    times: np.ndarray = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise ValidationError("observation values must be (T, q)")
        if self.missing is None:
            missing = np.isnan(values)
        else:
            missing = np.asarray(self.missing, dtype=bool).reshape(values.shape)
            if np.any(np.isnan(values) & ~missing):
                raise ValidationError("NaN observation not marked missing")
        if np.any(~np.isfinite(values) & ~missing):
            raise ValidationError("observed values must be finite")
        values = np.where(missing, 0.0, values)
        t_len, q = values.shape
        if self.noise is None:
            noise = np.zeros((t_len, q, q))
        else:
            noise = check_array(self.noise, "noise")
            if noise.ndim == 2:
                noise = np.broadcast_to(noise, (t_len, q, q))
            if noise.shape != (t_len, q, q):
                raise ValidationError(f"noise must be ({q}, {q}) or ({t_len}, {q}, {q})")
        self.values = np.ascontiguousarray(values)
        self.missing = np.ascontiguousarray(missing)
        self.noise = np.ascontiguousarray(noise)
        if self.times is None:
            self.times = np.arange(1, t_len + 1)
        else:
            self.times = np.asarray(self.times)
            if self.times.shape != (t_len,):
                raise ValidationError("times must have one entry per row")

    def __len__(self):
        return self.values.shape[0]

    @property
    def n_obs(self):
        return self.values.shape[1]

    def as_nan(self):
        """Values with NaN at missing positions."""
        return np.where(self.missing, np.nan, self.values)

    def subset(self, rows):
        rows = np.asarray(rows)
        return ObservationSeries(self.values[rows], self.missing[rows], self.noise[rows],
                                 self.times[rows])

    @classmethod
    def empty(cls, t_len, q, noise=None):
        """A fully missing series of length ``t_len``."""
        return cls(np.full((t_len, q), np.nan), noise=noise)


@dataclass
class FilterResult:
    """Output of :func:`kalman_filter`.

    ``pred_mean``/``pred_cov`` are the one-step predictions of the state,
    ``filt_mean``/``filt_cov`` the updated moments, ``obs_mean``/``obs_cov``
    the predictive moments of the observations, and ``loglik_terms`` the
    per-time contributions (nats) to ``loglik``.
    """

    pred_mean: np.ndarray
    pred_cov: np.ndarray
    filt_mean: np.ndarray
    filt_cov: np.ndarray
    obs_mean: np.ndarray
    obs_cov: np.ndarray
    loglik_terms: np.ndarray
    loglik: float
    flags: int = 0

    @property
    def used_pinv(self):
        return bool(self.flags & K.FLAG_PINV)


def _prepare(ssm, inputs, obs):
    t_len = len(obs)
    if obs.n_obs != ssm.n_obs:
        raise ValidationError(f"observations have {obs.n_obs} columns, model expects {ssm.n_obs}")
    inputs = check_array(inputs, "inputs")
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.shape != (t_len, ssm.B_d.shape[1]):
        raise ValidationError(
            f"inputs must be ({t_len}, {ssm.B_d.shape[1]}), got {inputs.shape}")
    bu = np.ascontiguousarray(inputs @ ssm.B_d.T)
    r = obs.noise + ssm.noise_stack(t_len)
    return bu, r


def kalman_filter(ssm, inputs, obs):
    """Run the filter and keep every intermediate moment."""
    bu, r = _prepare(ssm, inputs, obs)
    mps, pps, mfs, pfs, yhats, ss, lls, flags = K.kf_full(
        ssm.A_d, bu, ssm.Q_d, ssm.H_d, r, obs.values, obs.missing, ssm.m0, ssm.P0)
    return FilterResult(mps, pps, mfs, pfs, yhats, ss, lls, float(lls.sum()), int(flags))


def loglik(ssm, inputs, obs):
    """Log-likelihood (nats) only; cheaper than :func:`kalman_filter`."""
    if obs.missing.all():
        return 0.0
    bu, r = _prepare(ssm, inputs, obs)
    ll, _ = K.kf_loglik(ssm.A_d, bu, ssm.Q_d, ssm.H_d, r, obs.values, obs.missing,
                        ssm.m0, ssm.P0)
    return float(ll)


def ffbs_sample(filt, ssm, rng=None, size=None, return_flags=False):
    """Draw state trajectories from the joint smoothing distribution.

    Returns an array ``(T, n)``, or ``(size, T, n)`` when ``size`` is given.
    The same generator state always yields the same draw.
    """
    rng = check_random_state(rng)
    t_len, n = filt.filt_mean.shape
    gains, factors, flags = K.ffbs_prepare(ssm.A_d, filt.pred_mean, filt.pred_cov,
                                           filt.filt_mean, filt.filt_cov, FFBS_RIDGE)
    z = rng.standard_normal((1 if size is None else size, t_len, n))
    draws = K.ffbs_draw(filt.pred_mean, filt.filt_mean, gains, factors, z)
    out = draws[0] if size is None else draws
    if return_flags:
        return out, int(flags)
    return out
