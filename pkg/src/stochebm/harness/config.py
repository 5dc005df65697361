"""Run configuration: a YAML file validated against a schema.

Every default gives the full-scale run (burn-in 25 000, 250 000
iterations thinned by 200, kappa = 1, the hyperpriors of
:class:`stochebm.hier.HierPriors`). Relative paths are resolved against the
configuration file's directory.
"""
import os
from typing import List, Optional, Tuple

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, field_validator

from ..ebm import N_PARAMS, TABLE2
from ..exceptions import ValidationError
from ..hier.priors import HierPriors
from ..hier.sampler import McmcConfig

ENV_OUT = "STOCHEBM_OUT"
ENV_THREADS = "STOCHEBM_THREADS"


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MemberSpec(_Strict):
    label: str
    scenario: str
    abrupt: Optional[str] = None


class PriorSpec(_Strict):
    mu0: Optional[List[float]] = Field(None, description="log-scale prior mean of mu_lambda")
    Sigma0_diag: Optional[List[float]] = None
    Psi_diag: Optional[List[float]] = None
    d: float = float(N_PARAMS)
    a_nu: float = float(np.log(0.1))
    b_nu: float = float((np.log(10.0) / 3.0) ** 2)
    kappa: float = 1.0

    def build(self):
        base = HierPriors()
        kw = {"d": self.d, "a_nu": self.a_nu, "b_nu": self.b_nu, "kappa": self.kappa}
        if self.mu0 is not None:
            kw["mu0"] = np.array(self.mu0)
        if self.Sigma0_diag is not None:
            kw["Sigma0"] = np.diag(self.Sigma0_diag)
        if self.Psi_diag is not None:
            kw["Psi"] = np.diag(self.Psi_diag)
        try:
            return HierPriors(**{**{"mu0": base.mu0}, **kw})
        except ValidationError as exc:
            raise ValidationError(f"priors: {exc}") from None


class McmcSpec(_Strict):
    n_chains: int = 4
    burn_in: int = 25000
    n_iter: int = 250000
    thin: int = 200
    seed: int = 0
    p0_delta: float = 1e-6
    map_maxfev: int = 4000
    checkpoint_every: int = 1000
    store_delta: bool = False

    def build(self, seed=None):
        try:
            return McmcConfig(n_chains=self.n_chains, burn_in=self.burn_in, n_iter=self.n_iter,
                              thin=self.thin, seed=self.seed if seed is None else seed,
                              p0_delta=self.p0_delta, map_maxfev=self.map_maxfev,
                              checkpoint_every=self.checkpoint_every,
                              store_delta=self.store_delta)
        except ValidationError as exc:
            raise ValidationError(f"mcmc: {exc}") from None


class CvMcmcSpec(McmcSpec):
    n_iter: int = 100000
    thin: int = 40


class WindowSpec(_Strict):
    name: str
    window: Tuple[int, int]
    reference: Tuple[int, int]


class ProjectionSpec(_Strict):
    windows: List[WindowSpec] = Field(default_factory=list)
    thresholds: List[float] = Field(default_factory=lambda: [1.5, 2.0])
    preindustrial: Optional[Tuple[int, int]] = None
    obs_noise_sd: float = 0.0
    history: Optional[str] = None

    @field_validator("history")
    @classmethod
    def _history(cls, v):
        if v not in (None, "state", "observed"):
            raise ValueError("history must be null, 'state' or 'observed'")
        return v


class CvSpec(_Strict):
    obs_sd: float = 0.0
    mcmc: CvMcmcSpec = Field(default_factory=CvMcmcSpec)


class MleDemoSpec(_Strict):
    n_samples: int = 1000
    n_restarts: int = 5
    maxfev: int = 20000


class SyntheticSpec(_Strict):
    n_members: int = 5
    tau_H: int = 60
    tau_F: int = 140
    start_year: int = 1850
    abrupt_len: int = 150
    obs_sd: float = 0.1
    mu: Optional[List[float]] = Field(None, description="natural-scale population means")
    mu_row: str = "Ensemble"
    Sigma_diag: List[float] = Field(default_factory=lambda: [0.01] * N_PARAMS)
    sigma_nu: float = 0.05
    kappa: float = 1.0
    final_factor: float = 1.6
    zero_variability: bool = False
    discrepancy_ramp: float = 0.0
    seed: int = 0

    @field_validator("mu_row")
    @classmethod
    def _row(cls, v):
        if v not in TABLE2:
            raise ValueError(f"unknown parameter row {v!r}")
        return v

    def log_mu(self):
        vals = np.array(self.mu) if self.mu is not None else np.array(TABLE2[self.mu_row])
        if vals.shape != (N_PARAMS,) or np.any(vals <= 0):
            raise ValidationError(f"synthetic.mu must hold {N_PARAMS} positive values")
        return np.log(vals)


class RunConfig(_Strict):
    """Validated run configuration."""

    members: List[MemberSpec] = Field(default_factory=list)
    observations: Optional[str] = None
    forcing: Optional[str] = None
    hist_end: Optional[int] = Field(None, description="last observed year (end of tau_H)")
    horizon_end: Optional[int] = Field(None, description="last projected year (end of tau_F)")
    abrupt_factor: float = 2.0
    priors: PriorSpec = Field(default_factory=PriorSpec)
    mcmc: McmcSpec = Field(default_factory=McmcSpec)
    cv: CvSpec = Field(default_factory=CvSpec)
    projection: ProjectionSpec = Field(default_factory=ProjectionSpec)
    mle_demo: MleDemoSpec = Field(default_factory=MleDemoSpec)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    output_dir: str = "out"
    threads: int = 1
    base_dir: str = "."

    def path(self, p):
        return p if os.path.isabs(p) else os.path.normpath(os.path.join(self.base_dir, p))

    def referenced_files(self):
        files = []
        for m in self.members:
            files.append(self.path(m.scenario))
            if m.abrupt:
                files.append(self.path(m.abrupt))
        for p in (self.observations, self.forcing):
            if p:
                files.append(self.path(p))
        return files


def load_config(path=None, overrides=None):
    """Parse and validate a YAML configuration (defaults if ``path`` is None).

    Raises ValidationError naming the offending key.
    """
    raw = {}
    base = os.getcwd()
    if path is not None:
        if not os.path.isfile(path):
            raise ValidationError(f"{path}: configuration file not found")
        with open(path) as fh:
            try:
                raw = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ValidationError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise ValidationError(f"{path}: top level must be a mapping")
        base = os.path.dirname(os.path.abspath(path))
    raw = {**raw, **(overrides or {})}
    raw.setdefault("base_dir", base)
    try:
        cfg = RunConfig(**raw)
    except PydanticError as exc:
        err = exc.errors()[0]
        loc = ".".join(str(x) for x in err["loc"])
        raise ValidationError(f"config: {loc}: {err['msg']}") from None
    return cfg


def resolve_output_dir(cfg, cli_value=None):
    """CLI flag, then $STOCHEBM_OUT, then the config value."""
    if cli_value:
        return cli_value
    env = os.environ.get(ENV_OUT)
    return env if env else cfg.path(cfg.output_dir)


def resolve_threads(cfg, cli_value=None):
    """CLI flag, then $STOCHEBM_THREADS, then the config value."""
    if cli_value is not None:
        v = cli_value
    elif os.environ.get(ENV_THREADS):
        try:
            v = int(os.environ[ENV_THREADS])
        except ValueError:
            raise ValidationError(f"{ENV_THREADS} must be an integer") from None
    else:
        v = cfg.threads
    if v < 1:
        raise ValidationError("thread count must be at least 1")
    return v
