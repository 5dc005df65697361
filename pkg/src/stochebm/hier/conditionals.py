"""Full conditionals of the hierarchical model that can be sampled directly."""
import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .. import _kernels as K
from ..exceptions import NumericalError, ValidationError
from ..validation import check_random_state

LOG_2PI = np.log(2.0 * np.pi)


def conjugate_mu_params(lam, Sigma, priors):
    """Mean and covariance of ``mu_lambda | Sigma_lambda, lambda_1..M``.

    Precision ``Sigma0^-1 + M Sigma^-1``; mean solves
    ``(Sigma0^-1 + M Sigma^-1) m = Sigma0^-1 mu0 + Sigma^-1 sum_m lambda_m``.
    """
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64)).reshape(-1, priors.dim)
    m = lam.shape[0]
    c0 = cho_factor(priors.Sigma0, lower=True)
    prec = cho_solve(c0, np.eye(priors.dim))
    rhs = cho_solve(c0, priors.mu0)
    if m:
        cs = cho_factor(Sigma, lower=True)
        prec = prec + m * cho_solve(cs, np.eye(priors.dim))
        rhs = rhs + cho_solve(cs, lam.sum(axis=0))
    prec = 0.5 * (prec + prec.T)
    try:
        cp = cho_factor(prec, lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError("singular precision in the mu_lambda conditional") from None
    cov = cho_solve(cp, np.eye(priors.dim))
    return cho_solve(cp, rhs), 0.5 * (cov + cov.T)


def conjugate_sigma_params(lam, mu, priors):
    """Scale ``Psi + sum_m (lambda_m - mu)(lambda_m - mu)'`` and dof ``d + M``
    of the inverse-Wishart conditional of ``Sigma_lambda``."""
    lam = np.atleast_2d(np.asarray(lam, dtype=np.float64)).reshape(-1, priors.dim)
    resid = lam - mu
    scale = priors.Psi + resid.T @ resid
    return 0.5 * (scale + scale.T), priors.d + lam.shape[0]


def mvn_draw(mean, cov, rng):
    lc = np.linalg.cholesky(cov)
    return mean + lc @ rng.standard_normal(mean.shape[0])


def inverse_wishart(scale, dof, rng):
    """One draw from ``IW(scale, dof)`` via the Bartlett decomposition.

    If ``W ~ Wishart(dof, scale^-1)`` then ``W^-1 ~ IW(scale, dof)``.
    """
    scale = np.asarray(scale, dtype=np.float64)
    p = scale.shape[0]
    if not dof > p - 1:
        raise ValidationError(f"inverse-Wishart dof must exceed {p - 1}")
    # scale^-1 = C C' with C = L^-T for scale = L L'
    lo = np.linalg.cholesky(scale)
    a = np.zeros((p, p))
    a[np.diag_indices(p)] = np.sqrt(rng.chisquare(dof - np.arange(p)))
    low = np.tril_indices(p, -1)
    a[low] = rng.standard_normal(len(low[0]))
    # W = C A A' C'  =>  W^-1 = L A^-T A^-1 L' = (L A^-T)(L A^-T)'
    b = lo @ solve_triangular(a, np.eye(p), lower=True).T
    out = b @ b.T
    return 0.5 * (out + out.T)


def conjugate_mu_sigma(lam, Sigma, priors, rng=None):
    """Steps (4) and (5) of the sweep: ``mu_lambda`` given the current
    ``Sigma_lambda``, then ``Sigma_lambda`` given the new ``mu_lambda``."""
    rng = check_random_state(rng)
    mean, cov = conjugate_mu_params(lam, Sigma, priors)
    mu = mvn_draw(mean, cov, rng)
    scale, dof = conjugate_sigma_params(lam, mu, priors)
    return mu, inverse_wishart(scale, dof, rng)


def augmented_nu_model(sigma_delta, sigma_nu, p0_delta):
    """Transition, noise and initial covariance of the state
    ``(delta_1..delta_M, nu)`` with ``delta_m`` observed exactly."""
    sd = np.asarray(sigma_delta, dtype=np.float64)
    m = sd.shape[0]
    n = m + 1
    a = np.zeros((n, n))
    a[:m, :m] = np.eye(m)
    s2 = float(sigma_nu) ** 2
    w = np.full((n, n), s2)
    w[:m, :m] += np.diag(sd ** 2)
    h = np.zeros((m, n))
    h[:, :m] = np.eye(m)
    p0 = np.zeros((n, n))
    p0[:m, :m] = p0_delta * np.eye(m)
    return a, w, h, p0


def sample_shared_nu(delta, sigma_delta, sigma_nu, rng=None, p0_delta=1e-6, size=None):
    """FFBS draw of the shared increments ``nu`` given the discrepancy paths.

    Parameters
    ----------
    delta : array (M, T)
    sigma_delta : array (M,)
    sigma_nu : float
    size : int, optional
        Number of independent draws; returns ``(size, T)`` when given.

    Returns
    -------
    nu : array (T,) or (size, T)
    """
    rng = check_random_state(rng)
    delta = np.atleast_2d(np.asarray(delta, dtype=np.float64))
    sigma_delta = np.atleast_1d(np.asarray(sigma_delta, dtype=np.float64))
    m, t_len = delta.shape
    if t_len == 0:
        raise ValidationError("discrepancy paths must be non-empty")
    if sigma_delta.shape != (m,):
        raise ValidationError("need one sigma_delta per discrepancy path")
    if np.any(sigma_delta < 0) or not sigma_nu >= 0:
        raise ValidationError("standard deviations must be non-negative")
    if not np.all(np.isfinite(delta)):
        raise ValidationError("discrepancy paths must be finite")
    s = 1 if size is None else int(size)
    if m == 0:
        out = sigma_nu * rng.standard_normal((s, t_len))
        return out[0] if size is None else out
    a, w, h, p0 = augmented_nu_model(sigma_delta, sigma_nu, p0_delta)
    n = m + 1
    y = np.ascontiguousarray(delta.T)
    mask = np.zeros((t_len, m), dtype=np.bool_)
    r = np.zeros((t_len, m, m))
    bu = np.zeros((t_len, n))
    mps, pps, mfs, pfs, _, _, _, _ = K.kf_full(a, bu, w, h, r, y, mask, np.zeros(n), p0)
    ridge = 1e-12 * max(float(w.diagonal().max()), 1e-300)
    gains, factors, _ = K.ffbs_prepare(a, mps, pps, mfs, pfs, ridge)
    z = rng.standard_normal((s, t_len, n))
    draws = K.ffbs_draw(mps, mfs, gains, factors, z)
    nu = np.ascontiguousarray(draws[:, :, m])
    return nu[0] if size is None else nu


def sigma_nu_log_target(log_sigma, nu, priors):
    """Log prior of ``log sigma_nu`` plus the i.i.d. normal log-likelihood of
    the increments."""
    nu = np.asarray(nu)
    s2 = np.exp(2.0 * log_sigma)
    lp = -0.5 * (log_sigma - priors.a_nu) ** 2 / priors.b_nu - 0.5 * np.log(2 * np.pi * priors.b_nu)
    return lp - 0.5 * nu.size * (LOG_2PI + 2.0 * log_sigma) - 0.5 * float(nu @ nu) / s2


def mvn_logpdf_chol(x, mean, chol):
    """Normal log-density with covariance ``chol chol'``."""
    z = solve_triangular(chol, x - mean, lower=True)
    return -0.5 * float(z @ z) - float(np.log(np.diag(chol)).sum()) - 0.5 * x.shape[0] * LOG_2PI
