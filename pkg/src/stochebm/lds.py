"""Exact discretization of continuous-time linear-Gaussian systems.

The continuous system is ``dx = (A x + B f) dt + dW`` with ``Cov(dW) = Q dt``.
Holding the input ``f`` fixed over each step, one step of the discrete system

    x(t) = A_d x(t-1) + B_d f(t) + w(t),   w(t) ~ N(0, Q_d)

reproduces the continuous dynamics exactly.
"""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .exceptions import NumericalError, ValidationError
from .validation import check_array, check_psd, check_square

NEG_EIG_CLAMP = 1e-10
STATIONARY_TOL = 1e-12
STATIONARY_MAX_ITER = 200


@dataclass(frozen=True)
class ContinuousLGS:
    """Continuous drift ``A`` (1/yr), input map ``B`` and diffusion rate ``Q``."""

    A: np.ndarray
    B: np.ndarray
    Q: np.ndarray

    def __post_init__(self):
        a = check_square(self.A, "A")
        b = check_array(self.B, "B", ndim=2)
        q = check_array(self.Q, "Q", ndim=2)
        n = a.shape[0]
        if b.shape[0] != n or q.shape != (n, n):
            raise ValidationError(
                f"inconsistent dimensions: A {a.shape}, B {b.shape}, Q {q.shape}")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "Q", check_psd(q, "Q"))

    @property
    def n_states(self):
        return self.A.shape[0]


@dataclass
class LinearGaussianSSM:
    """Discrete state-space model consumed by the Kalman filter and FFBS.

    ``R_d`` may be a single ``q x q`` matrix or a ``T x q x q`` stack when the
    observation noise varies over time.
    """

    A_d: np.ndarray
    B_d: np.ndarray
    Q_d: np.ndarray
    H_d: np.ndarray
    R_d: np.ndarray
    m0: np.ndarray
    P0: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A_d = check_square(self.A_d, "A_d")
        n = self.A_d.shape[0]
        self.B_d = check_array(self.B_d, "B_d", ndim=2)
        self.H_d = check_array(self.H_d, "H_d", ndim=2)
        self.R_d = check_array(self.R_d, "R_d")
        self.Q_d = check_array(self.Q_d, "Q_d", ndim=2)
        self.P0 = check_array(self.P0, "P0", ndim=2)
        self.m0 = check_array(self.m0, "m0", ndim=1)
        q = self.H_d.shape[0]
        if (self.B_d.shape[0] != n or self.H_d.shape[1] != n or self.Q_d.shape != (n, n)
                or self.P0.shape != (n, n) or self.m0.shape != (n,)):
            raise ValidationError("inconsistent state-space dimensions")
        if self.R_d.shape[-2:] != (q, q) or self.R_d.ndim not in (2, 3):
            raise ValidationError(f"R_d must be ({q}, {q}) or (T, {q}, {q})")

    @property
    def n_states(self):
        return self.A_d.shape[0]

    @property
    def n_obs(self):
        return self.H_d.shape[0]

    def noise_stack(self, t_len):
        """Observation noise as a contiguous ``T x q x q`` array."""
        if self.R_d.ndim == 2:
            return np.ascontiguousarray(np.broadcast_to(self.R_d, (t_len,) + self.R_d.shape))
        if self.R_d.shape[0] != t_len:
            raise ValidationError(f"R_d has {self.R_d.shape[0]} time slices, expected {t_len}")
        return self.R_d


def clean_covariance(p, name="covariance"):
    """Symmetrize and clamp eigenvalues in [-1e-10, 0) to zero.

    Raises NumericalError if an eigenvalue is more negative than the clamp.
    """
    p = 0.5 * (p + p.T)
    work = np.empty_like(p)
    if K.chol_psd(p, work) == K.CHOL_PD:
        return p
    w, v = np.linalg.eigh(p)
    scale = max(1.0, float(np.abs(w).max()))
    if w.min() < -NEG_EIG_CLAMP * scale:
        raise NumericalError(f"{name} has a negative eigenvalue {w.min():.3e}",
                             min_eigenvalue=float(w.min()))
    w = np.where(w < 0, 0.0, w)
    p = (v * w) @ v.T
    return 0.5 * (p + p.T)


def matrix_exponential(m):
    """``exp(M)`` by scaling-and-squaring with a degree-13 Pade approximant."""
    m = check_square(m, "M")
    if m.shape[0] == 0:
        return m.copy()
    out = K.expm_pade13(m)
    if not np.all(np.isfinite(out)):
        norm = float(np.abs(m).sum(axis=0).max())
        raise NumericalError(f"matrix exponential overflowed (1-norm {norm:.3e})", norm=norm)
    return out


def phi1(m):
    """``sum_k M^k / (k+1)!``, defined for singular ``M``."""
    m = check_square(m, "M")
    n = m.shape[0]
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = m
    aug[:n, n:] = np.eye(n)
    return matrix_exponential(aug)[:n, n:]


def discretize(sys, dt=1.0):
    """Return ``(A_d, B_d, Q_d)`` for a zero-order-hold step of length ``dt``.

    ``B_d`` comes from the augmented exponential ``exp([[A, B], [0, 0]] dt)``
    so it is defined when ``A`` is singular. ``Q_d`` uses Van Loan's block
    exponential.
    """
    if not np.isfinite(dt) or dt <= 0:
        raise ValidationError("dt must be positive")
    ad, bd, qd = K.discretize_kernel(sys.A, sys.B, sys.Q, float(dt))
    if not (np.all(np.isfinite(ad)) and np.all(np.isfinite(bd)) and np.all(np.isfinite(qd))):
        norm = float(np.abs(sys.A).sum(axis=0).max()) * dt
        raise NumericalError(f"discretization overflowed (1-norm of A dt {norm:.3e})", norm=norm)
    return ad, bd, clean_covariance(qd, "Q_d")


def stationary_covariance(a_d, q_d, subspace=None):
    """Solve the discrete Lyapunov equation ``P = A P A' + Q``.

    ``subspace`` selects the stochastic stationary states; the remaining
    rows/columns of the result are zero and must be filled by the caller.
    """
    a_d = check_square(a_d, "A_d")
    q_d = check_square(q_d, "Q_d")
    n = a_d.shape[0]
    idx = np.arange(n) if subspace is None else np.asarray(subspace, dtype=int)
    a_sub = np.ascontiguousarray(a_d[np.ix_(idx, idx)])
    q_sub = np.ascontiguousarray(q_d[np.ix_(idx, idx)])
    if a_sub.size:
        eig = np.linalg.eigvals(a_sub)
        worst = eig[np.argmax(np.abs(eig))]
        if abs(worst) >= 1.0 - 1e-14:
            raise NumericalError(
                f"no stationary covariance: eigenvalue {worst:.6g} has modulus >= 1",
                eigenvalue=complex(worst))
    p_sub, iters, ok = K.stationary_doubling(a_sub, q_sub, STATIONARY_TOL, STATIONARY_MAX_ITER)
    if not ok or not np.all(np.isfinite(p_sub)):
        raise NumericalError(f"stationary covariance did not converge in {iters} doublings",
                             iterations=iters)
    out = np.zeros((n, n))
    out[np.ix_(idx, idx)] = clean_covariance(p_sub, "P0")
    return out
