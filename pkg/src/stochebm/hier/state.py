"""Data, state and output containers of the hierarchical sampler."""
from dataclasses import dataclass, field

import numpy as np

from ..ebm import N_PARAMS, PARAM_NAMES, ScenarioData
from ..exceptions import ValidationError


@dataclass
class MemberData:
    """One ensemble member: historical/future run plus optional abrupt run."""

    label: str
    scenario: ScenarioData
    abrupt: ScenarioData = None

    @property
    def has_data(self):
        return (not self.scenario.obs.missing.all()
                or (self.abrupt is not None and not self.abrupt.obs.missing.all()))


@dataclass
class EnsembleData:
    """All inputs of a hierarchical fit.

    Every member scenario spans the same ``tau_F`` years; the real-world
    scenario covers the first ``tau_H`` of them.
    """

    members: list
    real_world: ScenarioData
    tau_F: int = None

    def __post_init__(self):
        self.members = list(self.members)
        lens = {len(m.scenario.obs) for m in self.members}
        if self.tau_F is None:
            if not lens:
                raise ValidationError("tau_F is required when there are no members")
            self.tau_F = lens.pop() if len(lens) == 1 else None
        if self.tau_F is None or lens - {self.tau_F}:
            raise ValidationError("all member scenarios must span the same tau_F years")
        labels = [m.label for m in self.members]
        if len(set(labels)) != len(labels):
            raise ValidationError("member labels must be unique")
        if self.tau_H > self.tau_F:
            raise ValidationError("real-world record longer than the scenario horizon")
        if self.real_world.obs.n_obs != 2:
            raise ValidationError("real-world observations must have (T1, N) columns")

    @property
    def n_members(self):
        return len(self.members)

    @property
    def tau_H(self):
        return len(self.real_world.obs)

    @property
    def labels(self):
        return [m.label for m in self.members]

    def permuted(self, order):
        return EnsembleData([self.members[i] for i in order], self.real_world, self.tau_F)


@dataclass
class EnsembleState:
    """Current values of every sampled block, on the log scale for
    parameters. The shared mean path is ``cumsum(nu)`` and is never stored."""

    log_theta: np.ndarray
    delta: np.ndarray
    nu: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    sigma_nu: float
    log_theta_Z: np.ndarray

    def __post_init__(self):
        self.log_theta = np.asarray(self.log_theta, dtype=np.float64).reshape(-1, N_PARAMS)
        m = self.log_theta.shape[0]
        self.nu = np.asarray(self.nu, dtype=np.float64)
        self.delta = np.asarray(self.delta, dtype=np.float64).reshape(m, self.nu.shape[0])
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.Sigma = np.asarray(self.Sigma, dtype=np.float64)
        self.log_theta_Z = np.asarray(self.log_theta_Z, dtype=np.float64)
        self.sigma_nu = float(self.sigma_nu)
        if not (np.all(np.isfinite(self.log_theta)) and np.all(np.isfinite(self.delta))
                and np.all(np.isfinite(self.nu)) and self.sigma_nu > 0):
            raise ValidationError("state has non-finite entries or non-positive sigma_nu")

    @property
    def n_members(self):
        return self.log_theta.shape[0]

    @property
    def shared_mean(self):
        """Random-walk mean path ``mu(t) = sum_{s <= t} nu(s)``."""
        return np.cumsum(self.nu)

    def copy(self):
        return EnsembleState(self.log_theta.copy(), self.delta.copy(), self.nu.copy(),
                             self.mu.copy(), self.Sigma.copy(), self.sigma_nu,
                             self.log_theta_Z.copy())

    def to_dict(self):
        return {"log_theta": self.log_theta.tolist(), "delta": self.delta.tolist(),
                "nu": self.nu.tolist(), "mu": self.mu.tolist(), "Sigma": self.Sigma.tolist(),
                "sigma_nu": self.sigma_nu, "log_theta_Z": self.log_theta_Z.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


DRAW_FIELDS = ("log_theta", "log_theta_Z", "mu", "Sigma", "sigma_nu", "nu", "delta")


@dataclass
class ChainOutput:
    """Thinned draws of all chains.

    ``draws[name]`` has leading axes ``(chain, draw)``. ``acceptance`` holds
    post-burn-in acceptance rates per block and chain.
    """

    draws: dict
    acceptance: dict
    labels: list
    rhat: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def n_chains(self):
        return self.draws["mu"].shape[0]

    @property
    def n_draws(self):
        return self.draws["mu"].shape[1]

    def flat(self, name):
        a = self.draws[name]
        return a.reshape((-1,) + a.shape[2:])

    def summaries(self):
        """Scalar series ``(chain, draw)`` on which convergence is judged."""
        out = {}
        for j, p in enumerate(PARAM_NAMES):
            out[f"mu_{p}"] = self.draws["mu"][:, :, j]
        for j, p in enumerate(PARAM_NAMES):
            out[f"log_Sigma_{p}"] = np.log(self.draws["Sigma"][:, :, j, j])
        out["log_sigma_nu"] = np.log(self.draws["sigma_nu"])
        for j, p in enumerate(PARAM_NAMES):
            out[f"log_theta_Z_{p}"] = self.draws["log_theta_Z"][:, :, j]
        for m, lab in enumerate(self.labels):
            for j, p in enumerate(PARAM_NAMES):
                out[f"log_theta_{lab}_{p}"] = self.draws["log_theta"][:, :, m, j]
        return out

    @staticmethod
    def is_hyperparameter(name):
        return name.startswith(("mu_", "log_Sigma_", "log_sigma_nu"))
