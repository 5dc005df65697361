"""Compiled small-dense-matrix kernels.

Everything here works on float64 C-contiguous arrays with n <= ~16, so the
kernels use explicit loops rather than BLAS calls.
"""
import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)

# Status codes shared by the factorization helpers.
CHOL_PD = 0
CHOL_SEMIDEF = 1
CHOL_FAIL = 2

# Diagnostic bits reported by the filter / FFBS kernels.
FLAG_PINV = 1
FLAG_RIDGE = 2
FLAG_CLAMP = 4


@njit(cache=True)
def mm(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for p in range(k):
            aip = a[i, p]
            if aip != 0.0:
                for j in range(m):
                    out[i, j] += aip * b[p, j]
    return out


@njit(cache=True)
def mmt(a, b):
    """a @ b.T"""
    n, k = a.shape
    m = b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[j, p]
            out[i, j] = s
    return out


@njit(cache=True)
def mv(a, x):
    n, k = a.shape
    out = np.zeros(n)
    for i in range(n):
        s = 0.0
        for p in range(k):
            s += a[i, p] * x[p]
        out[i] = s
    return out


@njit(cache=True)
def symmetrize(p):
    n = p.shape[0]
    for i in range(n):
        for j in range(i + 1, n):
            v = 0.5 * (p[i, j] + p[j, i])
            p[i, j] = v
            p[j, i] = v


@njit(cache=True)
def chol_psd(p, out):
    """Lower Cholesky factor of a symmetric PSD matrix.

    Zero pivots (relative to the largest diagonal entry) produce a zero
    column instead of failing. Returns CHOL_PD, CHOL_SEMIDEF or CHOL_FAIL.
    """
    n = p.shape[0]
    scale = 0.0
    for i in range(n):
        if p[i, i] > scale:
            scale = p[i, i]
    tol = 1e-13 * scale if scale > 0.0 else 1e-300
    status = CHOL_PD
    for i in range(n):
        for j in range(n):
            out[i, j] = 0.0
    for j in range(n):
        d = p[j, j]
        for k in range(j):
            d -= out[j, k] * out[j, k]
        if d > tol:
            ljj = math.sqrt(d)
            out[j, j] = ljj
            for i in range(j + 1, n):
                s = p[i, j]
                for k in range(j):
                    s -= out[i, k] * out[j, k]
                out[i, j] = s / ljj
        elif d >= -1e3 * tol:
            status = CHOL_SEMIDEF
            # a zero pivot needs a (numerically) zero column below it
            for i in range(j + 1, n):
                s = p[i, j]
                for k in range(j):
                    s -= out[i, k] * out[j, k]
                if abs(s) > 2e-5 * scale:
                    return CHOL_FAIL
        else:
            return CHOL_FAIL
    return status


@njit(cache=True)
def psd_factor(p, out):
    """Square-root factor L with L L' ~= p, clamping small negative
    eigenvalues when Cholesky fails. Returns True if clamping was needed."""
    status = chol_psd(p, out)
    if status != CHOL_FAIL:
        return False
    w, v = np.linalg.eigh(p)
    n = p.shape[0]
    for j in range(n):
        s = math.sqrt(w[j]) if w[j] > 0.0 else 0.0
        for i in range(n):
            out[i, j] = v[i, j] * s
    return True


@njit(cache=True)
def chol_solve(l, b):
    """Solve (l l') x = b for PD lower factor l; b is (n, m)."""
    n = l.shape[0]
    m = b.shape[1]
    x = b.copy()
    for c in range(m):
        for i in range(n):
            s = x[i, c]
            for k in range(i):
                s -= l[i, k] * x[k, c]
            x[i, c] = s / l[i, i]
        for i in range(n - 1, -1, -1):
            s = x[i, c]
            for k in range(i + 1, n):
                s -= l[k, i] * x[k, c]
            x[i, c] = s / l[i, i]
    return x


@njit(cache=True)
def sym_inverse_logdet(s):
    """Inverse and log-determinant of a symmetric matrix.

    Cholesky first; on failure an eigendecomposition pseudo-inverse over the
    numerically positive eigenvalues. Returns (inv, logdet, used_pinv).
    """
    n = s.shape[0]
    l = np.empty((n, n))
    status = chol_psd(s, l)
    if status == CHOL_PD:
        logdet = 0.0
        for i in range(n):
            logdet += 2.0 * math.log(l[i, i])
        return chol_solve(l, np.eye(n)), logdet, False
    w, v = np.linalg.eigh(s)
    wmax = 0.0
    for i in range(n):
        if abs(w[i]) > wmax:
            wmax = abs(w[i])
    tol = 1e-12 * wmax if wmax > 0.0 else 1e-300
    inv = np.zeros((n, n))
    logdet = 0.0
    for k in range(n):
        if w[k] > tol:
            logdet += math.log(w[k])
            for i in range(n):
                vik = v[i, k] / w[k]
                for j in range(n):
                    inv[i, j] += vik * v[j, k]
    return inv, logdet, True


# ---------------------------------------------------------------------------
# matrix exponential: Higham (2005) scaling and squaring, Pade degree 13

_B13 = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0, 960960.0,
    16380.0, 182.0, 1.0,
])
_THETA13 = 5.371920351148152


@njit(cache=True)
def one_norm(a):
    n, m = a.shape
    best = 0.0
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += abs(a[i, j])
        if s > best:
            best = s
    return best


@njit(cache=True)
def expm_pade13(a):
    n = a.shape[0]
    norm = one_norm(a)
    if norm == 0.0:
        return np.eye(n)
    s = 0
    if norm > _THETA13:
        s = int(math.ceil(math.log2(norm / _THETA13)))
    x = a / (2.0 ** s)
    b = _B13
    ident = np.eye(n)
    x2 = mm(x, x)
    x4 = mm(x2, x2)
    x6 = mm(x2, x4)
    u_inner = b[13] * x6 + b[11] * x4 + b[9] * x2
    u = mm(x, mm(x6, u_inner) + b[7] * x6 + b[5] * x4 + b[3] * x2 + b[1] * ident)
    v_inner = b[12] * x6 + b[10] * x4 + b[8] * x2
    v = mm(x6, v_inner) + b[6] * x6 + b[4] * x4 + b[2] * x2 + b[0] * ident
    r = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        r = mm(r, r)
    return r


@njit(cache=True)
def discretize_kernel(a, b, q, dt):
    """Exact zero-order-hold discretization (A_d, B_d, Q_d)."""
    n = a.shape[0]
    p = b.shape[1]
    aug = np.zeros((n + p, n + p))
    for i in range(n):
        for j in range(n):
            aug[i, j] = a[i, j] * dt
        for j in range(p):
            aug[i, n + j] = b[i, j] * dt
    e1 = expm_pade13(aug)
    ad = e1[:n, :n].copy()
    bd = e1[:n, n:].copy()
    # Van Loan: exp([[-A, Q], [0, A']] dt) = [[., F12], [0, F22]], Q_d = F22' F12
    vl = np.zeros((2 * n, 2 * n))
    for i in range(n):
        for j in range(n):
            vl[i, j] = -a[i, j] * dt
            vl[i, n + j] = q[i, j] * dt
            vl[n + i, n + j] = a[j, i] * dt
    e2 = expm_pade13(vl)
    f12 = e2[:n, n:].copy()
    f22 = e2[n:, n:].copy()
    qd = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = 0.0
            for k in range(n):
                s += f22[k, i] * f12[k, j]
            qd[i, j] = s
    symmetrize(qd)
    return ad, bd, qd


@njit(cache=True)
def stationary_doubling(ad, qd, tol, max_iter):
    """Solve P = A P A' + Q by doubling. Returns (P, iterations, converged)."""
    p = qd.copy()
    a = ad.copy()
    for it in range(max_iter):
        inc = mmt(mm(a, p), a)
        p = p + inc
        symmetrize(p)
        a = mm(a, a)
        big = 0.0
        pmax = 0.0
        for i in range(p.shape[0]):
            for j in range(p.shape[1]):
                if abs(inc[i, j]) > big:
                    big = abs(inc[i, j])
                if abs(p[i, j]) > pmax:
                    pmax = abs(p[i, j])
        if big <= tol * max(pmax, 1.0):
            return p, it + 1, True
    return p, max_iter, False


# ---------------------------------------------------------------------------
# Kalman filter


@njit(cache=True)
def _filter_core(ad, bu, qd, h, r, y, mask, m0, p0, store, mps, pps, mfs, pfs, yhats, ss,
                 lls):
    """Shared recursion of kf_loglik / kf_full on preallocated buffers."""
    t_len = y.shape[0]
    n = ad.shape[0]
    q = h.shape[0]
    m = m0.copy()
    p = p0.copy()
    mp = np.empty(n)
    pp = np.empty((n, n))
    ap = np.empty((n, n))
    tmp = np.empty((n, n))
    ikh = np.empty((n, n))
    idx = np.empty(q, dtype=np.int64)
    yhat = np.empty(q)
    hp = np.empty((q, n))
    sf = np.empty((q, q))
    so = np.empty((q, q))
    lo = np.empty((q, q))
    sinv = np.empty((q, q))
    e = np.empty(q)
    gain = np.empty((n, q))
    ll = 0.0
    flags = 0
    for t in range(t_len):
        # predict
        for i in range(n):
            acc = bu[t, i]
            for j in range(n):
                acc += ad[i, j] * m[j]
            mp[i] = acc
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for k in range(n):
                    acc += ad[i, k] * p[k, j]
                ap[i, j] = acc
        for i in range(n):
            for j in range(i, n):
                acc = 0.0
                for k in range(n):
                    acc += ap[i, k] * ad[j, k]
                v = acc + 0.5 * (qd[i, j] + qd[j, i])
                pp[i, j] = v
                pp[j, i] = v
        # observation moments
        for a in range(q):
            acc = 0.0
            for j in range(n):
                acc += h[a, j] * mp[j]
            yhat[a] = acc
            for j in range(n):
                acc = 0.0
                for k in range(n):
                    acc += h[a, k] * pp[k, j]
                hp[a, j] = acc
        for a in range(q):
            for b in range(a, q):
                acc = 0.0
                for k in range(n):
                    acc += hp[a, k] * h[b, k]
                v = acc + 0.5 * (r[t, a, b] + r[t, b, a])
                sf[a, b] = v
                sf[b, a] = v
        nk = 0
        for a in range(q):
            if not mask[t, a]:
                idx[nk] = a
                nk += 1
        lli = 0.0
        if nk == 0:
            for i in range(n):
                m[i] = mp[i]
                for j in range(n):
                    p[i, j] = pp[i, j]
        else:
            for a in range(nk):
                e[a] = y[t, idx[a]] - yhat[idx[a]]
                for b in range(nk):
                    so[a, b] = sf[idx[a], idx[b]]
            # Cholesky of the observed block; eigen pseudo-inverse if not PD
            scale = 0.0
            for a in range(nk):
                if so[a, a] > scale:
                    scale = so[a, a]
            tol = 1e-13 * scale if scale > 0.0 else 1e-300
            pd = True
            for jj in range(nk):
                d = so[jj, jj]
                for k in range(jj):
                    d -= lo[jj, k] * lo[jj, k]
                if d <= tol:
                    pd = False
                    break
                ljj = math.sqrt(d)
                lo[jj, jj] = ljj
                for ii in range(jj + 1, nk):
                    acc = so[ii, jj]
                    for k in range(jj):
                        acc -= lo[ii, k] * lo[jj, k]
                    lo[ii, jj] = acc / ljj
            if pd:
                logdet = 0.0
                for a in range(nk):
                    logdet += 2.0 * math.log(lo[a, a])
                # sinv = (L L')^-1 column by column
                for c in range(nk):
                    for a in range(nk):
                        acc = 1.0 if a == c else 0.0
                        for k in range(a):
                            acc -= lo[a, k] * sinv[k, c]
                        sinv[a, c] = acc / lo[a, a]
                    for a in range(nk - 1, -1, -1):
                        acc = sinv[a, c]
                        for k in range(a + 1, nk):
                            acc -= lo[k, a] * sinv[k, c]
                        sinv[a, c] = acc / lo[a, a]
            else:
                inv, logdet, _ = sym_inverse_logdet(so[:nk, :nk].copy())
                for a in range(nk):
                    for b in range(nk):
                        sinv[a, b] = inv[a, b]
                flags |= FLAG_PINV
            # gain = P H_o' S_o^-1 (P H' = hp')
            for i in range(n):
                for a in range(nk):
                    acc = 0.0
                    for b in range(nk):
                        acc += hp[idx[b], i] * sinv[b, a]
                    gain[i, a] = acc
            for i in range(n):
                acc = mp[i]
                for a in range(nk):
                    acc += gain[i, a] * e[a]
                m[i] = acc
            # Joseph form (I - K H) P (I - K H)' + K R K'
            for i in range(n):
                for j in range(n):
                    acc = 1.0 if i == j else 0.0
                    for a in range(nk):
                        acc -= gain[i, a] * h[idx[a], j]
                    ikh[i, j] = acc
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for k in range(n):
                        acc += ikh[i, k] * pp[k, j]
                    tmp[i, j] = acc
            for i in range(n):
                for j in range(i, n):
                    acc = 0.0
                    for k in range(n):
                        acc += tmp[i, k] * ikh[j, k]
                    for a in range(nk):
                        ga = gain[i, a]
                        if ga != 0.0:
                            for b in range(nk):
                                acc += ga * r[t, idx[a], idx[b]] * gain[j, b]
                    p[i, j] = acc
                    p[j, i] = acc
            quad = 0.0
            for a in range(nk):
                for b in range(nk):
                    quad += e[a] * sinv[a, b] * e[b]
            lli = -0.5 * (nk * LOG_2PI + logdet + quad)
        ll += lli
        if store:
            for i in range(n):
                mps[t, i] = mp[i]
                mfs[t, i] = m[i]
                for j in range(n):
                    pps[t, i, j] = pp[i, j]
                    pfs[t, i, j] = p[i, j]
            for a in range(q):
                yhats[t, a] = yhat[a]
                for b in range(q):
                    ss[t, a, b] = sf[a, b]
            lls[t] = lli
    return ll, flags


@njit(cache=True)
def kf_loglik(ad, bu, qd, h, r, y, mask, m0, p0):
    """Log-likelihood only (no storage). Returns (loglik, flags)."""
    e3 = np.empty((0, 0, 0))
    e2 = np.empty((0, 0))
    e1 = np.empty(0)
    return _filter_core(ad, bu, qd, h, r, y, mask, m0, p0, False, e2, e3, e2, e3, e2, e3, e1)


@njit(cache=True)
def kf_full(ad, bu, qd, h, r, y, mask, m0, p0):
    t_len = y.shape[0]
    n = ad.shape[0]
    q = h.shape[0]
    mps = np.empty((t_len, n))
    pps = np.empty((t_len, n, n))
    mfs = np.empty((t_len, n))
    pfs = np.empty((t_len, n, n))
    yhats = np.empty((t_len, q))
    ss = np.empty((t_len, q, q))
    lls = np.empty(t_len)
    _, flags = _filter_core(ad, bu, qd, h, r, y, mask, m0, p0, True, mps, pps, mfs, pfs, yhats,
                            ss, lls)
    return mps, pps, mfs, pfs, yhats, ss, lls, flags


# ---------------------------------------------------------------------------
# forward filtering, backward sampling


@njit(cache=True)
def ffbs_prepare(ad, mps, pps, mfs, pfs, ridge):
    """Backward gains and factors of the backward conditional covariances.

    Returns (gains, factors, flags); gains[t] maps x(t+1) - xhat(t+1) to the
    conditional mean of x(t); factors[T-1] factors the final filtered cov.
    """
    t_len, n = mfs.shape
    gains = np.zeros((t_len, n, n))
    factors = np.zeros((t_len, n, n))
    flags = 0
    lt = np.empty((n, n))
    l = np.empty((n, n))
    pp = np.empty((n, n))
    apf = np.empty((n, n))
    gt = np.empty((n, n))
    cov = np.empty((n, n))
    if psd_factor(pfs[t_len - 1], lt):
        flags |= FLAG_CLAMP
    factors[t_len - 1] = lt
    for t in range(t_len - 2, -1, -1):
        for i in range(n):
            for j in range(n):
                pp[i, j] = pps[t + 1, i, j]
                acc = 0.0
                for k in range(n):
                    acc += ad[i, k] * pfs[t, k, j]
                apf[i, j] = acc
        # G' = R(t+1)^-1 A V(t)
        status = chol_psd(pp, l)
        if status != CHOL_PD:
            flags |= FLAG_RIDGE
            for i in range(n):
                pp[i, i] += ridge
            status = chol_psd(pp, l)
        if status == CHOL_PD:
            for c in range(n):
                for i in range(n):
                    acc = apf[i, c]
                    for k in range(i):
                        acc -= l[i, k] * gt[k, c]
                    gt[i, c] = acc / l[i, i]
                for i in range(n - 1, -1, -1):
                    acc = gt[i, c]
                    for k in range(i + 1, n):
                        acc -= l[k, i] * gt[k, c]
                    gt[i, c] = acc / l[i, i]
        else:
            flags |= FLAG_PINV
            inv, _, _ = sym_inverse_logdet(pp)
            gt[:, :] = mm(inv, apf)
        for i in range(n):
            for j in range(n):
                gains[t, i, j] = gt[j, i]
        for i in range(n):
            for j in range(i, n):
                acc = 0.0
                for k in range(n):
                    acc += gt[k, i] * apf[k, j]
                v = 0.5 * (pfs[t, i, j] + pfs[t, j, i]) - acc
                cov[i, j] = v
                cov[j, i] = v
        if psd_factor(cov, lt):
            flags |= FLAG_CLAMP
        factors[t] = lt
    return gains, factors, flags


@njit(cache=True)
def ffbs_draw(mps, mfs, gains, factors, z):
    """Draw trajectories from prepared backward quantities.

    z has shape (size, T, n) of standard normals."""
    size, t_len, n = z.shape
    out = np.empty((size, t_len, n))
    for s in range(size):
        x = mfs[t_len - 1] + mv(factors[t_len - 1], z[s, t_len - 1])
        out[s, t_len - 1] = x
        for t in range(t_len - 2, -1, -1):
            mean = mfs[t] + mv(gains[t], x - mps[t + 1])
            x = mean + mv(factors[t], z[s, t])
            out[s, t] = x
    return out


# ---------------------------------------------------------------------------
# forward simulation


@njit(cache=True)
def simulate_kernel(ad, bu, lq, h, lr, x0, zw, zv):
    """x(t) = A x(t-1) + Bu(t) + Lq zw(t); y(t) = H x(t) + Lr(t) zv(t).

    zw: (size, T, n), zv: (size, T, q); x0: (size, n)."""
    size, t_len, n = zw.shape
    q = h.shape[0]
    xs = np.empty((size, t_len, n))
    ys = np.empty((size, t_len, q))
    for s in range(size):
        x = x0[s].copy()
        for t in range(t_len):
            x = mv(ad, x) + bu[t] + mv(lq, zw[s, t])
            xs[s, t] = x
            ys[s, t] = mv(h, x) + mv(lr[t], zv[s, t])
    return xs, ys


# ---------------------------------------------------------------------------
# EBM system assembly

EBM_OK = 0
EBM_OVERFLOW = 1
EBM_NOT_STATIONARY = 2


@njit(cache=True)
def ebm_system(p, extended, dt, p0_delta, floor, tol, max_iter):
    """Discrete EBM matrices from natural parameters in canonical order.

    Returns (A_d, B_d, Q_d, H, P0, status). ``P0`` is the stationary
    covariance of the thermal block; for the extended model ``P0[4, 4]`` is
    ``p0_delta``.
    """
    g, c1, c2, c3, k1, k2, k3, eps, sf, st, fc = (
        p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8], p[9], p[10])
    n = 5 if extended else 4
    m = 3 if extended else 1
    a = np.zeros((n, n))
    a[0, 0] = -g
    a[1, 0] = 1.0 / c1
    a[1, 1] = -(k1 + k2) / c1
    a[1, 2] = k2 / c1
    a[2, 1] = k2 / c2
    a[2, 2] = -(k2 + eps * k3) / c2
    a[2, 3] = eps * k3 / c2
    a[3, 2] = k3 / c3
    a[3, 3] = -k3 / c3
    b = np.zeros((n, m))
    b[0, 0] = g * fc
    q = np.zeros((n, n))
    q[0, 0] = max(sf * sf, floor)
    q[1, 1] = max((st / c1) ** 2, floor)
    h = np.zeros((2, n))
    h[0, 1] = 1.0
    h[1, 0] = 1.0
    h[1, 1] = -k1
    h[1, 2] = (1.0 - eps) * k3
    h[1, 3] = -(1.0 - eps) * k3
    if extended:
        a[1, 4] = 1.0 / c1
        # positive aerosol optical depth cools
        b[0, 1] = -g * p[11]
        b[4, 2] = 1.0
        q[4, 4] = max(p[12] * p[12], floor)
        h[1, 4] = 1.0
    ad, bd, qd = discretize_kernel(a, b, q, dt)
    p0 = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if not (math.isfinite(ad[i, j]) and math.isfinite(qd[i, j])):
                return ad, bd, qd, h, p0, EBM_OVERFLOW
        for j in range(m):
            if not math.isfinite(bd[i, j]):
                return ad, bd, qd, h, p0, EBM_OVERFLOW
    ps, _, ok = stationary_doubling(ad[:4, :4].copy(), qd[:4, :4].copy(), tol, max_iter)
    if not ok:
        return ad, bd, qd, h, p0, EBM_NOT_STATIONARY
    for i in range(4):
        for j in range(4):
            p0[i, j] = ps[i, j]
            if not math.isfinite(ps[i, j]):
                return ad, bd, qd, h, p0, EBM_NOT_STATIONARY
    if extended:
        p0[4, 4] = p0_delta
    return ad, bd, qd, h, p0, EBM_OK
