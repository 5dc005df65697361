"""Hierarchical Bayesian ensemble model: priors, Gibbs sampler, diagnostics."""
from .conditionals import (conjugate_mu_params, conjugate_mu_sigma, conjugate_sigma_params,
                           inverse_wishart, sample_shared_nu)
from .diagnostics import rhat_table, split_rhat
from .estimator import HierarchicalEBM
from .mh import RamProposal, mh_step, ram_adapt
from .priors import MU0_NATURAL, HierPriors
from .sampler import (GibbsChain, MapInfo, McmcConfig, initialize_chain, map_estimates,
                      run_chains)
from .state import ChainOutput, EnsembleData, EnsembleState, MemberData

__all__ = [
    "ChainOutput", "EnsembleData", "EnsembleState", "GibbsChain", "HierPriors",
    "HierarchicalEBM", "MU0_NATURAL", "MapInfo", "McmcConfig", "MemberData", "RamProposal",
    "conjugate_mu_params", "conjugate_mu_sigma", "conjugate_sigma_params", "initialize_chain",
    "inverse_wishart", "map_estimates", "mh_step", "ram_adapt", "rhat_table", "run_chains",
    "sample_shared_nu", "split_rhat",
]
