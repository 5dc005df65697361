"""Random-walk Metropolis-Hastings with robust adaptive (RAM) proposals.

The proposal is ``y = x + S z`` with ``z ~ N(0, I)``. During burn-in the
lower-triangular factor ``S`` is updated after every step so that

    S_new S_new' = S (I + eta_n (alpha_n - alpha*) u u') S',   u = z / |z|,

with step size ``eta_n = min(1, d n^-gamma)``; afterwards it is frozen.
"""
import math
from dataclasses import dataclass

import numpy as np

from ..exceptions import NumericalError, ValidationError

RAM_GAMMA = 2.0 / 3.0
OPTIMAL_SCALE = 2.38


@dataclass
class RamProposal:
    """Proposal factor and adaptation state of one MH block."""

    chol: np.ndarray
    target: float
    n_adapt: int = 0
    gamma: float = RAM_GAMMA
    frozen: bool = False
    n_skipped: int = 0

    def __post_init__(self):
        self.chol = np.array(self.chol, dtype=np.float64, ndmin=2)
        if self.chol.shape[0] != self.chol.shape[1]:
            raise ValidationError("proposal factor must be square")
        if not 0.0 < self.target < 1.0:
            raise ValidationError("target acceptance must lie in (0, 1)")

    @classmethod
    def from_cov(cls, cov, target, scale=True):
        """Factor of ``2.38^2 cov / d`` (``scale=True``) or of ``cov``."""
        cov = np.array(cov, dtype=np.float64, ndmin=2)
        d = cov.shape[0]
        if scale:
            cov = OPTIMAL_SCALE ** 2 * cov / d
        return cls(np.linalg.cholesky(0.5 * (cov + cov.T)), target)

    @property
    def dim(self):
        return self.chol.shape[0]

    @property
    def cov(self):
        return self.chol @ self.chol.T

    def to_dict(self):
        return {"chol": self.chol.tolist(), "target": self.target, "n_adapt": self.n_adapt,
                "gamma": self.gamma, "frozen": self.frozen, "n_skipped": self.n_skipped}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class MHResult:
    x: np.ndarray
    log_target: float
    accepted: bool
    log_alpha: float
    z: np.ndarray

    @property
    def alpha(self):
        return math.exp(self.log_alpha)


def mh_step(x, current_log_target, log_target, proposal, rng):
    """One random-walk step.

    ``log_target`` may raise NumericalError/ValidationError or return a
    non-finite value; the proposal is then rejected. A current value of
    ``-inf`` (a state whose likelihood could not be evaluated) accepts any
    finite proposal. Exactly ``d + 1``
    variates are drawn per call whatever the outcome.

    Returns
    -------
    MHResult
    """
    if np.isnan(current_log_target) or current_log_target == np.inf:
        raise ValidationError("current log-target must be finite or -inf")
    x = np.asarray(x, dtype=np.float64)
    z = rng.standard_normal(proposal.dim)
    u = rng.random()
    y = x + proposal.chol @ z
    try:
        lt_y = float(log_target(y))
    except (NumericalError, ValidationError, np.linalg.LinAlgError, FloatingPointError):
        lt_y = -np.inf
    if not np.isfinite(lt_y):
        return MHResult(x, current_log_target, False, -np.inf, z)
    log_alpha = 0.0 if current_log_target == -np.inf else min(0.0, lt_y - current_log_target)
    if u < math.exp(log_alpha):
        return MHResult(y, lt_y, True, log_alpha, z)
    return MHResult(x, current_log_target, False, log_alpha, z)


def ram_adapt(proposal, z, alpha):
    """Rank-one update of the proposal factor in place; no-op when frozen.

    Returns the proposal.
    """
    if proposal.frozen:
        return proposal
    z = np.asarray(z, dtype=np.float64)
    norm = float(np.sqrt(z @ z))
    proposal.n_adapt += 1
    if norm == 0.0:
        return proposal
    d = proposal.dim
    eta = min(1.0, d * proposal.n_adapt ** (-proposal.gamma))
    c = eta * (alpha - proposal.target)
    w = proposal.chol @ (z / norm)
    m = proposal.chol @ proposal.chol.T + c * np.outer(w, w)
    try:
        new = np.linalg.cholesky(0.5 * (m + m.T))
    except np.linalg.LinAlgError:
        proposal.n_skipped += 1
        return proposal
    if not np.all(np.isfinite(new)):
        proposal.n_skipped += 1
        return proposal
    proposal.chol = new
    return proposal
