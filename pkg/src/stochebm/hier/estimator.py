"""Estimator-style wrapper around the hierarchical sampler."""
from sklearn.base import BaseEstimator

from ..projection import ecs_posterior, project_real_world
from .priors import HierPriors
from .sampler import McmcConfig, run_chains


class HierarchicalEBM(BaseEstimator):
    """Hierarchical ensemble EBM.

    ``fit`` samples the joint posterior of an :class:`EnsembleData`;
    ``predict`` returns real-world projections under a future forcing.
    """

    def __init__(self, priors=None, n_chains=4, burn_in=25000, n_iter=250000, thin=200,
                 random_state=0, p0_delta=1e-6, n_jobs=1, map_maxfev=4000, store_delta=False):
        self.priors = priors
        self.n_chains = n_chains
        self.burn_in = burn_in
        self.n_iter = n_iter
        self.thin = thin
        self.random_state = random_state
        self.p0_delta = p0_delta
        self.n_jobs = n_jobs
        self.map_maxfev = map_maxfev
        self.store_delta = store_delta

    def _config(self):
        return McmcConfig(n_chains=self.n_chains, burn_in=self.burn_in, n_iter=self.n_iter,
                          thin=self.thin, seed=self.random_state, p0_delta=self.p0_delta,
                          map_maxfev=self.map_maxfev, store_delta=self.store_delta)

    def fit(self, data, y=None):
        priors = HierPriors() if self.priors is None else self.priors
        self.posterior_ = run_chains(data, priors, self._config(), n_jobs=self.n_jobs)
        self.data_ = data
        return self

    def _check_fitted(self):
        if not hasattr(self, "posterior_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit first")

    def predict(self, future_forcing, rng=None, obs_noise_sd=0.0, history=None):
        self._check_fitted()
        rng = self.random_state if rng is None else rng
        return project_real_world(self.posterior_, self.data_.real_world, future_forcing, rng,
                                  self.p0_delta, obs_noise_sd, history)

    def ecs(self, population="real_world", rng=None):
        self._check_fitted()
        return ecs_posterior(self.posterior_, population,
                             self.random_state if rng is None else rng)
