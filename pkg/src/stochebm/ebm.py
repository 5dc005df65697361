"""Three-box stochastic energy-balance models in state-space form.

State ordering is ``(F, T1, T2, T3)`` for the basic model and
``(F, T1, T2, T3, delta)`` for the extended model with volcanic forcing and a
random-walk forcing discrepancy. Observations are ``(T1, N)``.
"""
from dataclasses import astuple, dataclass, fields

import numpy as np

from . import _kernels as K
from .exceptions import NumericalError, ValidationError
from .kalman import ObservationSeries
from .lds import STATIONARY_MAX_ITER, STATIONARY_TOL, ContinuousLGS, LinearGaussianSSM
from .validation import check_random_state

PARAM_NAMES = ("gamma", "C1", "C2", "C3", "k1", "k2", "k3", "epsilon",
               "sigma_F", "sigma_T", "F_C", "F_V", "sigma_delta")
BASIC_NAMES = PARAM_NAMES[:11]
N_PARAMS = len(PARAM_NAMES)
N_BASIC = len(BASIC_NAMES)

DEFAULT_P0_DELTA = 1e-6


@dataclass(frozen=True)
class EbmParams:
    """Model-specific EBM parameters, all strictly positive.

    ``F_V`` and ``sigma_delta`` only matter for the extended model and may be
    left as ``None`` for basic (abrupt-only) fits.
    """

    gamma: float
    C1: float
    C2: float
    C3: float
    k1: float
    k2: float
    k3: float
    epsilon: float
    sigma_F: float
    sigma_T: float
    F_C: float
    F_V: float = None
    sigma_delta: float = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None and f.name in ("F_V", "sigma_delta"):
                continue
            if v is None or not np.isfinite(v) or v <= 0:
                raise ValidationError(f"{f.name} must be finite and positive, got {v!r}")
            object.__setattr__(self, f.name, float(v))

    @property
    def is_extended(self):
        return self.F_V is not None and self.sigma_delta is not None

    def basic_subset(self):
        return astuple(self)[:N_BASIC]

    def to_array(self):
        if not self.is_extended:
            return np.array(self.basic_subset())
        return np.array(astuple(self))

    def to_log(self):
        return np.log(self.to_array())

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape not in ((N_BASIC,), (N_PARAMS,)):
            raise ValidationError(f"expected {N_BASIC} or {N_PARAMS} values, got {values.shape}")
        return cls(*values.tolist())

    @classmethod
    def from_log(cls, log_values):
        return cls.from_array(np.exp(np.asarray(log_values, dtype=np.float64)))

    def replace(self, **changes):
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return EbmParams(**d)


# Posterior means reported for the CMIP5 models, the ensemble and the
# observations, in PARAM_NAMES order.
TABLE2 = {
    "BCC-CSM1.1": (3.50, 3.93, 9.4, 53, 1.23, 2.71, 0.69, 1.28, 0.64, 0.37, 3.60, 23.8, 0.048),
    "CanESM2": (2.03, 4.02, 11.2, 71, 0.98, 2.12, 0.74, 1.32, 0.61, 0.54, 3.94, 18.6, 0.035),
    "CCSM4": (2.52, 4.40, 13.4, 78, 1.29, 2.03, 1.22, 1.37, 0.62, 0.51, 4.06, 23.1, 0.039),
    "CNRM-CM5": (3.54, 3.55, 10.2, 82, 1.14, 2.66, 0.64, 0.97, 0.56, 0.44, 3.66, 21.0, 0.048),
    "FGOALS-s2": (2.05, 4.56, 11.5, 134, 0.83, 1.67, 1.17, 1.28, 0.72, 0.64, 3.90, 20.0, 0.034),
    "GFDL-ESM2G": (2.36, 4.74, 14.8, 104, 1.46, 1.79, 1.48, 1.31, 0.71, 0.54, 3.63, 23.1, 0.038),
    "GISS-E2-R": (2.80, 5.09, 29.0, 118, 1.78, 1.93, 3.31, 1.44, 0.45, 0.35, 4.11, 23.4, 0.037),
    "HadGEM2-ES": (1.96, 4.13, 10.0, 91, 0.62, 2.34, 0.66, 1.37, 0.60, 0.40, 3.20, 14.8, 0.031),
    "IPSL-CM5A-MR": (2.27, 3.90, 12.0, 95, 0.79, 2.45, 0.75, 1.19, 0.52, 0.41, 3.47, 16.1, 0.034),
    "MIROC5": (1.58, 4.43, 22.6, 130, 1.61, 1.55, 1.77, 1.17, 0.52, 0.80, 4.45, 19.3, 0.032),
    "MPI-ESM-LR": (2.05, 4.08, 13.1, 74, 1.13, 1.98, 0.95, 1.33, 0.57, 0.61, 4.38, 20.3, 0.036),
    "MRI-CGCM3": (2.18, 3.96, 13.5, 66, 1.20, 2.62, 0.74, 1.27, 0.54, 0.39, 3.32, 16.6, 0.036),
    "NorESM1-M": (1.85, 4.74, 17.2, 107, 1.11, 2.05, 1.44, 1.42, 0.57, 0.44, 3.45, 16.7, 0.030),
    "Ensemble": (2.37, 4.29, 14.5, 94, 1.18, 2.16, 1.21, 1.29, 0.59, 0.50, 3.78, 19.8, 0.037),
    "Observations": (2.07, 4.39, 17.0, 102, 1.17, 2.24, 1.32, 1.34, 0.54, 0.45, 3.59, 17.2, 0.033),
}
CMIP5_MODELS = tuple(k for k in TABLE2 if k not in ("Ensemble", "Observations"))


def table2_params(name, extended=True):
    row = TABLE2[name]
    return EbmParams(*(row if extended else row[:N_BASIC]))


@dataclass
class ForcingSeries:
    """Aligned annual forcing: CO2 factor, volcanic AOD and optional shared
    discrepancy driver ``nu``."""

    f_C: np.ndarray
    f_V: np.ndarray = None
    nu: np.ndarray = None
    times: np.ndarray = None

    def __post_init__(self):
        self.f_C = np.asarray(self.f_C, dtype=np.float64)
        t_len = self.f_C.shape[0]
        self.f_V = np.zeros(t_len) if self.f_V is None else np.asarray(self.f_V, dtype=np.float64)
        if self.nu is not None:
            self.nu = np.asarray(self.nu, dtype=np.float64)
        for name in ("f_C", "f_V", "nu"):
            arr = getattr(self, name)
            if arr is None:
                continue
            if arr.shape != (t_len,):
                raise ValidationError(f"{name} must have length {t_len}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"{name} has missing or non-finite entries")
        self.times = np.arange(1, t_len + 1) if self.times is None else np.asarray(self.times)

    def __len__(self):
        return self.f_C.shape[0]

    def basic_inputs(self):
        return self.f_C[:, None].copy()

    def extended_inputs(self, nu=None):
        nu = self.nu if nu is None else np.asarray(nu, dtype=np.float64)
        if nu is None:
            nu = np.zeros(len(self))
        return np.column_stack([self.f_C, self.f_V, nu])

    def slice(self, start, stop):
        return ForcingSeries(self.f_C[start:stop], self.f_V[start:stop],
                             None if self.nu is None else self.nu[start:stop],
                             self.times[start:stop])


@dataclass
class ScenarioData:
    """Bivariate ``(T1, N)`` series with aligned forcing.

    ``tau_H`` is the number of historical (observed) years; ``tau_F`` the
    total length. For abrupt experiments both equal the series length.
    """

    label: str
    obs: ObservationSeries
    forcing: ForcingSeries
    tau_H: int = None
    tau_F: int = None

    def __post_init__(self):
        if len(self.obs) != len(self.forcing):
            raise ValidationError(
                f"{self.label}: {len(self.obs)} observation rows vs {len(self.forcing)} forcing rows")
        self.tau_F = len(self.obs) if self.tau_F is None else int(self.tau_F)
        self.tau_H = self.tau_F if self.tau_H is None else int(self.tau_H)
        if not 0 <= self.tau_H <= self.tau_F == len(self.obs):
            raise ValidationError(f"{self.label}: need 0 <= tau_H <= tau_F = series length")


def co2_forcing_factor(co2_ratio):
    """``log2`` of the CO2 concentration ratio."""
    ratio = np.asarray(co2_ratio, dtype=np.float64)
    if np.any(~np.isfinite(ratio)) or np.any(ratio <= 0):
        raise ValidationError("CO2 concentration ratio must be positive")
    out = np.log(ratio) / np.log(2.0)
    return float(out) if out.ndim == 0 else out


def ecs(theta):
    """Equilibrium climate sensitivity ``F_C / k1`` in kelvin."""
    return theta.F_C / theta.k1


def _thermal_block(theta):
    g, c1, c2, c3, k1, k2, k3, eps = theta.basic_subset()[:8]
    return np.array([
        [-g, 0.0, 0.0, 0.0],
        [1.0 / c1, -(k1 + k2) / c1, k2 / c1, 0.0],
        [0.0, k2 / c2, -(k2 + eps * k3) / c2, eps * k3 / c2],
        [0.0, 0.0, k3 / c3, -k3 / c3],
    ])


def _radiation_row(theta):
    k1, k3, eps = theta.k1, theta.k3, theta.epsilon
    return [1.0, -k1, (1.0 - eps) * k3, -(1.0 - eps) * k3]


def continuous_basic(theta, variance_floor=0.0):
    a = _thermal_block(theta)
    b = np.array([[theta.gamma * theta.F_C], [0.0], [0.0], [0.0]])
    q = np.diag([max(theta.sigma_F ** 2, variance_floor),
                 max((theta.sigma_T / theta.C1) ** 2, variance_floor), 0.0, 0.0])
    return ContinuousLGS(a, b, q)


def continuous_extended(theta, variance_floor=0.0):
    if not theta.is_extended:
        raise ValidationError("extended model needs F_V and sigma_delta")
    a = np.zeros((5, 5))
    a[:4, :4] = _thermal_block(theta)
    a[1, 4] = 1.0 / theta.C1
    b = np.zeros((5, 3))
    b[0, 0] = theta.gamma * theta.F_C
    # positive aerosol optical depth cools
    b[0, 1] = -theta.gamma * theta.F_V
    b[4, 2] = 1.0
    q = np.diag([max(theta.sigma_F ** 2, variance_floor),
                 max((theta.sigma_T / theta.C1) ** 2, variance_floor), 0.0, 0.0,
                 max(theta.sigma_delta ** 2, variance_floor)])
    return ContinuousLGS(a, b, q)


def ebm_arrays(values, extended, dt=1.0, p0_delta=DEFAULT_P0_DELTA, variance_floor=0.0):
    """Discrete ``(A_d, B_d, Q_d, H, P0)`` from natural parameters in
    ``PARAM_NAMES`` order, without building validated containers.

    Raises NumericalError when the discretization overflows or the thermal
    block has no stationary distribution.
    """
    if not np.isfinite(dt) or dt <= 0:
        raise ValidationError("dt must be positive")
    values = np.ascontiguousarray(values, dtype=np.float64)
    ad, bd, qd, h, p0, status = K.ebm_system(values, bool(extended), float(dt), float(p0_delta),
                                             float(variance_floor), STATIONARY_TOL,
                                             STATIONARY_MAX_ITER)
    if status == K.EBM_OVERFLOW:
        raise NumericalError("discretization overflowed", parameters=values.tolist())
    if status == K.EBM_NOT_STATIONARY:
        eig = np.linalg.eigvals(ad[:4, :4])
        worst = eig[np.argmax(np.abs(eig))]
        raise NumericalError(f"no stationary covariance: eigenvalue {worst:.6g}",
                             eigenvalue=complex(worst), parameters=values.tolist())
    return ad, bd, qd, h, p0


def build_basic_system(theta, dt=1.0, m0=None, p0_scale=1.0, variance_floor=0.0):
    """Four-state system ``(F, T1, T2, T3)``.

    The default initial mean ``(2 F_C, 0, 0, 0)`` is an equilibrium state
    hit by abrupt CO2 quadrupling; ``P0`` is the stationary covariance of
    the unforced system, times ``p0_scale``.
    """
    ad, bd, qd, h, p0 = ebm_arrays(np.array(theta.basic_subset()), False, dt,
                                   variance_floor=variance_floor)
    if m0 is None:
        m0 = np.array([2.0 * theta.F_C, 0.0, 0.0, 0.0])
    return LinearGaussianSSM(ad, bd, qd, h, np.zeros((2, 2)), m0, p0_scale * p0,
                             meta={"kind": "basic"})


def build_extended_system(theta, dt=1.0, p0_delta=DEFAULT_P0_DELTA, m0=None, p0_scale=1.0,
                          variance_floor=0.0):
    """Five-state system ``(F, T1, T2, T3, delta)`` driven by ``(f_C, f_V, nu)``.

    The drift has an all-zero last row, so ``B_d`` is obtained without
    inverting ``A``. ``P0`` is the stationary covariance of the thermal block
    (times ``p0_scale``) with variance ``p0_delta`` for ``delta(0)``.
    """
    if not theta.is_extended:
        raise ValidationError("extended model needs F_V and sigma_delta")
    if p0_delta < 0:
        raise ValidationError("p0_delta must be non-negative")
    ad, bd, qd, h, p0 = ebm_arrays(theta.to_array(), True, dt, p0_delta, variance_floor)
    p0[:4, :4] *= p0_scale
    m0 = np.zeros(5) if m0 is None else m0
    return LinearGaussianSSM(ad, bd, qd, h, np.zeros((2, 2)), m0, p0,
                             meta={"kind": "extended"})


@dataclass
class SimulationResult:
    states: np.ndarray
    obs: np.ndarray

    def as_scenario(self, label, forcing, tau_H=None):
        """Wrap a single simulated path as :class:`ScenarioData`."""
        y = self.obs if self.obs.ndim == 2 else self.obs[0]
        return ScenarioData(label, ObservationSeries(y), forcing, tau_H=tau_H)


def simulate(ssm, inputs, rng=None, size=None, x0=None, obs_noise=True):
    """Forward-simulate ``x(t) = A_d x(t-1) + B_d f(t) + w(t)``, ``y = H_d x + v``.

    ``x0`` defaults to a draw from ``N(m0, P0)``; pass an array ``(n,)`` or
    ``(size, n)`` to fix it. Returns arrays shaped ``(T, .)`` or
    ``(size, T, .)``.
    """
    rng = check_random_state(rng)
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    t_len = inputs.shape[0]
    n, q = ssm.n_states, ssm.n_obs
    s = 1 if size is None else int(size)
    lp0 = np.empty((n, n))
    K.psd_factor(np.ascontiguousarray(ssm.P0), lp0)
    if x0 is None:
        x0 = ssm.m0 + rng.standard_normal((s, n)) @ lp0.T
    else:
        x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64), (s, n)).copy()
    lq = np.empty((n, n))
    K.psd_factor(ssm.Q_d, lq)
    r = ssm.noise_stack(t_len)
    lr = np.zeros_like(r)
    if obs_noise:
        for t in range(t_len):
            K.psd_factor(np.ascontiguousarray(r[t]), lr[t])
    bu = np.ascontiguousarray(inputs @ ssm.B_d.T)
    zw = rng.standard_normal((s, t_len, n))
    zv = rng.standard_normal((s, t_len, q))
    xs, ys = K.simulate_kernel(ssm.A_d, bu, lq, ssm.H_d, lr, np.ascontiguousarray(x0), zw, zv)
    if size is None:
        return SimulationResult(xs[0], ys[0])
    return SimulationResult(xs, ys)
