"""Maximum-likelihood fits of the basic EBM to abrupt-4xCO2 output.

The fit maximizes the Kalman-filter log-likelihood over log-parameters with
a restarted Nelder-Mead simplex. Its inverse observed information gives an
asymptotic covariance, which :func:`project_mle` propagates into projections
alongside natural variability.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from . import _kernels as K
from .ebm import (BASIC_NAMES, N_BASIC, EbmParams, ForcingSeries, ScenarioData,
                  build_basic_system)
from .exceptions import ConvergenceError, NumericalError, ValidationError
from .kalman import ObservationSeries, loglik
from .projection import ProjectionEnsemble
from .validation import check_random_state

logger = logging.getLogger(__name__)

LOG10 = np.log(10.0)
BOUND_WIDTH = 3.0 * LOG10
HESSIAN_STEP = 1e-4


def default_init():
    """Prior means of the hierarchical model, restricted to the basic subset."""
    from .hier.priors import MU0_NATURAL

    return EbmParams(*MU0_NATURAL[:N_BASIC])


@dataclass
class MleFit:
    theta_hat: EbmParams
    log_theta_cov: np.ndarray
    loglik_at_max: float
    n_iter: int = 0
    n_evals: int = 0
    converged: bool = False
    hessian_pd: bool = True
    at_bound: tuple = ()
    history: list = field(default_factory=list)

    @property
    def log_theta_hat(self):
        return np.log(np.array(self.theta_hat.basic_subset()))

    @property
    def log_theta_sd(self):
        return np.sqrt(np.diag(self.log_theta_cov))


def abrupt_loglik(log_theta, data):
    """Kalman log-likelihood of an abrupt experiment at ``exp(log_theta)``."""
    theta = EbmParams.from_log(log_theta[:N_BASIC])
    ssm = build_basic_system(theta)
    return loglik(ssm, data.forcing.basic_inputs(), data.obs)


def _safe_negll(x, data):
    try:
        v = -abrupt_loglik(x, data)
    except (NumericalError, ValidationError, np.linalg.LinAlgError):
        return np.inf
    return v if np.isfinite(v) else np.inf


def numerical_hessian(fun, x, step=HESSIAN_STEP):
    """Central-difference Hessian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    f0 = fun(x)
    h = np.zeros((n, n))
    fp = np.empty(n)
    fm = np.empty(n)
    for i in range(n):
        e = np.zeros(n)
        e[i] = step
        fp[i] = fun(x + e)
        fm[i] = fun(x - e)
        h[i, i] = (fp[i] - 2.0 * f0 + fm[i]) / step ** 2
    for i in range(n):
        for j in range(i + 1, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = step
            ej[j] = step
            v = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej) + fun(x - ei - ej))
            h[i, j] = h[j, i] = v / (4.0 * step ** 2)
    return 0.5 * (h + h.T)


def covariance_from_hessian(h, floor=1e-8):
    """Invert a negative-log-likelihood Hessian, projecting to PD if needed.

    Returns ``(cov, was_pd)``.
    """
    if not np.all(np.isfinite(h)):
        raise NumericalError("Hessian has non-finite entries")
    w, v = np.linalg.eigh(0.5 * (h + h.T))
    pd = bool(w.min() > 0)
    scale = max(float(np.abs(w).max()), 1.0)
    w = np.maximum(w, floor * scale)
    cov = (v / w) @ v.T
    return 0.5 * (cov + cov.T), pd


def _nelder_mead(fun, x0, lower, upper, fatol, maxfev, step=0.1):
    n = x0.size
    simplex = np.vstack([x0] + [x0 + step * np.eye(n)[i] for i in range(n)])
    simplex = np.clip(simplex, lower, upper)
    res = minimize(fun, x0, method="Nelder-Mead",
                   bounds=list(zip(lower, upper)),
                   options={"xatol": 1e-6, "fatol": fatol, "maxfev": maxfev,
                            "initial_simplex": simplex, "adaptive": True})
    return res


def fit_abrupt(data, init=None, n_restarts=5, rng=0, fatol=1e-8, maxfev=20000,
               restart_scale=0.3, center=None):
    """Maximum-likelihood fit of the 11 basic parameters.

    Parameters
    ----------
    data : ScenarioData
        Abrupt experiment: constant CO2 factor, ``(T1, N)`` observations.
    init : EbmParams, optional
        Starting point; the hierarchical prior means by default.
    n_restarts : int
        Number of simplex searches. The first starts at ``init``; the rest
        at random log-scale perturbations of it. A final polish restarts
        from the best point found.
    center : array, optional
        Log-scale centre of the box constraint (``+-3 log 10``); defaults
        to the prior means.

    Raises
    ------
    ConvergenceError
        If no start produced a finite likelihood.
    """
    rng = check_random_state(rng)
    init = default_init() if init is None else init
    x_init = np.log(np.array(init.basic_subset()))
    c = np.log(np.array(default_init().basic_subset())) if center is None else np.asarray(center)
    lower, upper = c - BOUND_WIDTH, c + BOUND_WIDTH
    x_init = np.clip(x_init, lower, upper)

    def fun(x):
        return _safe_negll(x, data)

    starts = [x_init]
    for _ in range(max(n_restarts, 1) - 1):
        starts.append(np.clip(x_init + restart_scale * rng.standard_normal(x_init.size),
                              lower, upper))
    best = None
    history = []
    n_iter = n_evals = 0
    for x0 in starts:
        res = _nelder_mead(fun, x0, lower, upper, fatol, maxfev)
        n_iter += res.nit
        n_evals += res.nfev
        history.append(float(-res.fun))
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun):
        raise ConvergenceError("no start produced a finite likelihood", best=best)
    polish = _nelder_mead(fun, best.x, lower, upper, fatol, maxfev, step=0.02)
    n_iter += polish.nit
    n_evals += polish.nfev
    converged = bool(polish.success and best.fun - polish.fun < 1e-6)
    if polish.fun <= best.fun:
        best = polish
    history.append(float(-polish.fun))
    x_hat = best.x
    at_bound = tuple(BASIC_NAMES[i] for i in np.flatnonzero(
        (x_hat - lower < 1e-6) | (upper - x_hat < 1e-6)))
    if at_bound:
        converged = False
    h = numerical_hessian(fun, x_hat)
    if not np.all(np.isfinite(h)):
        h = np.where(np.isfinite(h), h, 0.0)
        converged = False
    cov, pd = covariance_from_hessian(h)
    if not pd:
        logger.warning("Hessian not positive definite; projected to nearest PD matrix")
    return MleFit(EbmParams.from_log(x_hat), cov, float(-best.fun), n_iter, n_evals,
                  converged, pd, at_bound, history)


def project_mle(fit, forcing, n_samples, rng=None, obs_noise=False):
    """Projections under parameter uncertainty and natural variability.

    Each sample draws log-parameters from ``N(theta_hat, cov)``, starts from
    the pre-industrial equilibrium ``(0, 0, 0, 0)`` and simulates the basic
    model under ``forcing.f_C``.
    """
    rng = check_random_state(rng)
    lt = fit.log_theta_hat
    lc = np.empty((N_BASIC, N_BASIC))
    K.psd_factor(np.ascontiguousarray(fit.log_theta_cov), lc)
    inputs = forcing.basic_inputs()
    t_len = len(forcing)
    out = np.empty((n_samples, t_len, 2))
    for s in range(n_samples):
        x = lt + lc @ rng.standard_normal(N_BASIC)
        ssm = build_basic_system(EbmParams.from_log(x), m0=np.zeros(4))
        lq = np.empty((4, 4))
        K.psd_factor(ssm.Q_d, lq)
        bu = np.ascontiguousarray(inputs @ ssm.B_d.T)
        zw = rng.standard_normal((1, t_len, 4))
        zv = rng.standard_normal((1, t_len, 2))
        lr = np.zeros((t_len, 2, 2))
        _, ys = K.simulate_kernel(ssm.A_d, bu, lq, ssm.H_d, lr, np.zeros((1, 4)), zw, zv)
        out[s] = ys[0]
    return ProjectionEnsemble(forcing.times, out)


def standardised_errors(truth, ens, return_flag=False):
    """``(Y - mean) / sd`` per time and variable from ensemble moments.

    Missing truth gives NaN. A zero ensemble SD with a nonzero error gives
    a signed infinity and sets the flag.
    """
    y = truth.as_nan() if isinstance(truth, ObservationSeries) else np.asarray(truth, float)
    if y.shape != ens.samples.shape[1:]:
        raise ValidationError(f"truth shape {y.shape} does not match ensemble {ens.samples.shape[1:]}")
    mean = ens.mean()
    sd = ens.sd()
    err = y - mean
    zero_sd = sd == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        z = err / sd
        z = np.where(zero_sd & (err == 0), 0.0, z)
        z = np.where(zero_sd & (err != 0) & ~np.isnan(err), np.copysign(np.inf, err), z)
    flag = bool(np.any(np.isinf(z)))
    return (z, flag) if return_flag else z


class AbruptEbmMLE(BaseEstimator):
    """Estimator wrapper: ``fit`` on an abrupt scenario, ``predict`` a
    projection ensemble under a new forcing."""

    def __init__(self, init=None, n_restarts=5, fatol=1e-8, maxfev=20000, random_state=0):
        self.init = init
        self.n_restarts = n_restarts
        self.fatol = fatol
        self.maxfev = maxfev
        self.random_state = random_state

    def fit(self, data, y=None):
        fit = fit_abrupt(data, self.init, self.n_restarts, self.random_state, self.fatol,
                         self.maxfev)
        self.fit_ = fit
        self.theta_ = fit.theta_hat
        self.log_theta_cov_ = fit.log_theta_cov
        self.loglik_ = fit.loglik_at_max
        self.converged_ = fit.converged
        return self

    def _check_fitted(self):
        if not hasattr(self, "fit_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit before predict")

    def predict(self, forcing, n_samples=1000, random_state=None):
        self._check_fitted()
        rs = self.random_state if random_state is None else random_state
        return project_mle(self.fit_, forcing, n_samples, rs)

    def score(self, data, y=None):
        self._check_fitted()
        return abrupt_loglik(self.fit_.log_theta_hat, data)
