"""Independent reference computations for the test suite.

Nothing here calls into the package's numerical kernels: every oracle is
built from dense numpy/scipy linear algebra, explicit integration or
brute-force enumeration.
"""
import numpy as np
from scipy.stats import multivariate_normal


def rk4(f, x0, t1, h):
    """Classical fourth-order Runge-Kutta from 0 to ``t1`` with step ``h``."""
    x = np.array(x0, dtype=float)
    n = int(round(t1 / h))
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def linear_ode_step(a, b, f, x0, h=1e-4, dt=1.0):
    """One step of ``dx/dt = A x + B f`` with ``f`` held constant."""
    bf = b @ f
    return rk4(lambda x: a @ x + bf, x0, dt, h)


def rk4_propagator(a, b, h=1e-4, dt=1.0):
    """Exact composition of ``dt / h`` classical RK4 steps for
    ``dx/dt = A x + B f`` with ``f`` held constant.

    One RK4 step is ``x -> R x + S B f`` with ``R`` the degree-4 Taylor
    polynomial of ``hA`` and ``S = h (I + hA/2 + (hA)^2/6 + (hA)^3/24)``.
    The ``dt / h`` steps are composed by binary powering of the affine map,
    which is algebraically identical to looping over ``rk4``.

    Returns
    -------
    (P, G) with ``x(dt) = P x(0) + G f``.
    """
    n = a.shape[0]
    e = np.eye(n)
    m = h * a
    m2 = m @ m
    m3 = m2 @ m
    r = e + m + m2 / 2 + m3 / 6 + m3 @ m / 24
    s = h * (e + m / 2 + m2 / 6 + m3 / 24)
    steps = int(round(dt / h))
    # (power, geometric sum) of the result and of the current square
    p_out, g_out = e, np.zeros((n, n))
    p_sq, g_sq = r, e
    while steps:
        if steps & 1:
            p_out, g_out = p_sq @ p_out, g_sq + p_sq @ g_out
        p_sq, g_sq = p_sq @ p_sq, g_sq + p_sq @ g_sq
        steps >>= 1
    return p_out, g_out @ s @ b


def taylor_expm(m, terms=30):
    out = np.eye(m.shape[0])
    term = np.eye(m.shape[0])
    for k in range(1, terms):
        term = term @ m / k
        out = out + term
    return out


def vanloan_quadrature(a, q, dt=1.0, panels=100_000):
    """Trapezoid rule for ``int_0^dt exp(A s) Q exp(A' s) ds``.

    ``exp(A s)`` is advanced by repeated multiplication with a
    Taylor-series ``exp(A h)``.
    """
    h = dt / panels
    step = taylor_expm(a * h, 25)
    e = np.eye(a.shape[0])
    total = 0.5 * q.copy()
    for i in range(1, panels):
        e = step @ e
        total += e @ q @ e.T
    e = step @ e
    total += 0.5 * e @ q @ e.T
    return total * h


def stacked_lgssm(a, bu, qd, h, r, m0, p0):
    """Joint mean and covariance of ``(x_1..x_T, y_1..y_T)``.

    ``x_0 ~ N(m0, P0)``, ``x_t = A x_{t-1} + bu_t + w_t``,
    ``y_t = H x_t + v_t``. Built as an explicit linear map of the primitive
    Gaussian inputs ``(x_0, w_1..w_T, v_1..v_T)``.
    """
    t_len, n = bu.shape
    q = h.shape[0]
    n_in = n + t_len * n + t_len * q
    lx = np.zeros((t_len * n, n_in))
    cx = np.zeros(t_len * n)
    powers = [np.eye(n)]
    for _ in range(t_len):
        powers.append(a @ powers[-1])
    for t in range(1, t_len + 1):
        rows = slice((t - 1) * n, t * n)
        lx[rows, :n] = powers[t]
        mean = powers[t] @ m0
        for s in range(1, t + 1):
            lx[rows, n + (s - 1) * n:n + s * n] = powers[t - s]
            mean = mean + powers[t - s] @ bu[s - 1]
        cx[rows] = mean
    big_h = np.kron(np.eye(t_len), h)
    ly = big_h @ lx
    for t in range(t_len):
        ly[t * q:(t + 1) * q, n + t_len * n + t * q:n + t_len * n + (t + 1) * q] = np.eye(q)
    cy = big_h @ cx
    cov_in = np.zeros((n_in, n_in))
    cov_in[:n, :n] = p0
    for t in range(t_len):
        o = n + t * n
        cov_in[o:o + n, o:o + n] = qd
        o = n + t_len * n + t * q
        cov_in[o:o + q, o:o + q] = r[t]
    lin = np.vstack([lx, ly])
    return np.concatenate([cx, cy]), lin @ cov_in @ lin.T, t_len * n


def joint_loglik(a, bu, qd, h, r, m0, p0, y, missing):
    """Log-density of the observed entries of ``y`` under the stacked
    joint Gaussian."""
    mean, cov, nx = stacked_lgssm(a, bu, qd, h, r, m0, p0)
    obs = ~np.asarray(missing).ravel()
    if not obs.any():
        return 0.0
    my = mean[nx:][obs]
    cy = cov[nx:, nx:][np.ix_(obs, obs)]
    return float(multivariate_normal(my, cy).logpdf(np.asarray(y).ravel()[obs]))


def joint_smoother(a, bu, qd, h, r, m0, p0, y, missing):
    """Mean and covariance of ``(x_1..x_T)`` given the observed ``y``."""
    mean, cov, nx = stacked_lgssm(a, bu, qd, h, r, m0, p0)
    obs = np.concatenate([np.zeros(nx, bool), ~np.asarray(missing).ravel()])
    xs = np.arange(nx)
    yv = np.asarray(y).ravel()[obs[nx:]]
    cxy = cov[np.ix_(xs, obs)]
    cyy = cov[np.ix_(obs, obs)]
    gain = np.linalg.solve(cyy, cxy.T).T
    return mean[:nx] + gain @ (yv - mean[obs]), cov[:nx, :nx] - gain @ cxy.T


def nu_conditional(delta, sigma_delta, sigma_nu, p0_delta):
    """Mean and covariance of ``nu_1..nu_T`` given exact discrepancy paths.

    ``delta_m(t) = delta_m(t-1) + nu(t) + sigma_delta_m e_m(t)`` with
    ``delta_m(0) ~ N(0, p0_delta)`` and ``nu(t) ~ N(0, sigma_nu^2)``.
    The joint covariance of all ``delta_m(t)`` and ``nu(t)`` is assembled
    from cumulative sums and conditioned directly.
    """
    delta = np.atleast_2d(delta)
    m, t_len = delta.shape
    # inputs: delta_m(0) (m), nu (T), e (m*T)
    n_in = m + t_len + m * t_len
    var_in = np.concatenate([np.full(m, p0_delta), np.full(t_len, sigma_nu ** 2),
                             np.repeat(np.asarray(sigma_delta) ** 2, t_len)])
    rows = []
    for i in range(m):
        for t in range(t_len):
            row = np.zeros(n_in)
            row[i] = 1.0
            row[m:m + t + 1] = 1.0
            row[m + t_len + i * t_len:m + t_len + i * t_len + t + 1] = 1.0
            rows.append(row)
    ld = np.array(rows)
    ln = np.zeros((t_len, n_in))
    ln[:, m:m + t_len] = np.eye(t_len)
    cdd = (ld * var_in) @ ld.T
    cnd = (ln * var_in) @ ld.T
    cnn = (ln * var_in) @ ln.T
    gain = np.linalg.solve(cdd, cnd.T).T
    return gain @ delta.ravel(), cnn - gain @ cnd.T


def moment_z_scores(draws, mean, cov):
    """Standardised deviations of sample means and sample covariances from
    their targets, using the draws' own fourth moments for the covariance
    standard errors."""
    draws = np.asarray(draws)
    n = draws.shape[0]
    m_hat = draws.mean(axis=0)
    se_mean = draws.std(axis=0, ddof=1) / np.sqrt(n)
    z_mean = (m_hat - mean) / se_mean
    c = draws - m_hat
    prod = c[:, :, None] * c[:, None, :]
    c_hat = prod.mean(axis=0)
    se_cov = prod.std(axis=0, ddof=1) / np.sqrt(n)
    z_cov = (c_hat - cov) / se_cov
    return z_mean, z_cov
