"""Prior distributions of the hierarchical ensemble model."""
from dataclasses import dataclass, field

import numpy as np

from ..ebm import N_PARAMS
from ..exceptions import ValidationError
from ..validation import check_array

LOG10 = np.log(10.0)
PRIOR_VAR = (LOG10 / 3.0) ** 2

# Natural-scale prior means in PARAM_NAMES order; epsilon = 1.0 follows k3.
MU0_NATURAL = (2.0, 5.0, 20.0, 100.0, 1.0, 2.0, 1.0, 1.0, 0.5, 0.5, 3.0, 20.0, 0.05)


def _default_mu0():
    return np.log(np.array(MU0_NATURAL))


def _default_sigma0():
    return PRIOR_VAR * np.eye(N_PARAMS)


def _default_psi():
    return 1000.0 * np.eye(N_PARAMS)


@dataclass
class HierPriors:
    """Hyperpriors on log-parameters.

    ``mu_lambda ~ N(mu0, Sigma0)``, ``Sigma_lambda ~ IW(Psi, d)``,
    ``log sigma_nu ~ N(a_nu, b_nu)`` and, for the real world,
    ``log theta_Z ~ N(mu_lambda, kappa^2 Sigma_lambda)``.
    """

    mu0: np.ndarray = field(default_factory=_default_mu0)
    Sigma0: np.ndarray = field(default_factory=_default_sigma0)
    Psi: np.ndarray = field(default_factory=_default_psi)
    d: float = float(N_PARAMS)
    a_nu: float = float(np.log(0.1))
    b_nu: float = float(PRIOR_VAR)
    kappa: float = 1.0

    def __post_init__(self):
        self.mu0 = check_array(self.mu0, "mu0", ndim=1)
        p = self.mu0.shape[0]
        for name in ("Sigma0", "Psi"):
            m = check_array(getattr(self, name), name, ndim=2)
            if m.shape != (p, p):
                raise ValidationError(f"{name} must be {p}x{p}")
            if not np.allclose(m, m.T):
                raise ValidationError(f"{name} must be symmetric")
            m = 0.5 * (m + m.T)
            try:
                np.linalg.cholesky(m)
            except np.linalg.LinAlgError:
                raise ValidationError(f"{name} must be positive definite") from None
            setattr(self, name, m)
        if not self.d >= p:
            raise ValidationError(f"d must be at least {p}")
        if not (np.isfinite(self.b_nu) and self.b_nu > 0 and np.isfinite(self.a_nu)):
            raise ValidationError("sigma_nu prior needs finite a_nu and positive b_nu")
        if not self.kappa >= 1.0:
            raise ValidationError("kappa must be at least 1")
        self.d = float(self.d)
        self.kappa = float(self.kappa)

    @property
    def dim(self):
        return self.mu0.shape[0]

    def to_dict(self):
        return {"mu0": self.mu0.tolist(), "Sigma0": self.Sigma0.tolist(),
                "Psi": self.Psi.tolist(), "d": self.d, "a_nu": self.a_nu,
                "b_nu": self.b_nu, "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)
