"""Partially collapsed Gibbs sampler for the hierarchical ensemble model.

One sweep updates, in this order:

1. each member's log-parameters by random-walk MH, with its discrepancy
   integrated out by the extended Kalman filter;
2. each member's discrepancy path by FFBS;
3. the shared increments ``nu`` by FFBS of the augmented model;
4. ``mu_lambda`` and 5. ``Sigma_lambda`` from their conjugate conditionals;
6. ``log sigma_nu`` by MH;
7. the real-world log-parameters by MH.

Step 1 must precede step 2: step 1 targets a conditional that has the
discrepancy marginalized, so drawing the discrepancy first would leave the
joint posterior invariant only by accident.
"""
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import minimize

from .. import _kernels as K
from ..ebm import N_BASIC, N_PARAMS, ebm_arrays
from ..exceptions import NumericalError, ValidationError
from ..rng import generator_state, restore_generator
from .conditionals import (conjugate_mu_sigma, inverse_wishart, conjugate_sigma_params,
                           conjugate_mu_params, mvn_draw, mvn_logpdf_chol, sample_shared_nu,
                           sigma_nu_log_target)
from .diagnostics import rhat_table
from .mh import RamProposal, mh_step, ram_adapt
from .priors import HierPriors
from .state import ChainOutput, EnsembleState

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stochebm-chain-checkpoint"
CHECKPOINT_VERSION = 1
# Documented field order of a checkpoint body.
CHECKPOINT_FIELDS = ("format", "version", "fingerprint", "chain", "iteration", "state",
                     "proposals", "rng", "counts", "draws")
LOG_BOUND = 300.0
FFBS_RIDGE = 1e-12
SWEEP_STEPS = ("theta", "delta", "nu", "mu", "Sigma", "sigma_nu", "theta_Z")


@dataclass
class McmcConfig:
    """Run schedule. Adaptation happens during ``burn_in`` only; ``n_iter``
    further sweeps are thinned by ``thin``."""

    n_chains: int = 4
    burn_in: int = 25000
    n_iter: int = 250000
    thin: int = 200
    seed: int = 0
    p0_delta: float = 1e-6
    variance_floor: float = 1e-10
    target_accept: float = 0.26
    target_accept_nu: float = 0.44
    map_maxfev: int = 4000
    store_delta: bool = False
    checkpoint_every: int = 1000

    def __post_init__(self):
        for name in ("n_chains", "n_iter", "thin", "map_maxfev", "checkpoint_every"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be a positive integer")
        if int(self.burn_in) < 0:
            raise ValidationError("burn_in must be non-negative")
        if self.n_iter % self.thin:
            raise ValidationError("n_iter must be a multiple of thin")
        if not 0 < self.target_accept < 1 or not 0 < self.target_accept_nu < 1:
            raise ValidationError("target acceptance rates must lie in (0, 1)")

    @property
    def n_keep(self):
        return self.n_iter // self.thin

    @property
    def n_total(self):
        return self.burn_in + self.n_iter


# ---------------------------------------------------------------------------
# likelihoods


class _Series:
    """Contiguous arrays of one scenario for the compiled filter."""

    def __init__(self, scenario, extended):
        obs = scenario.obs
        self.y = obs.values
        self.mask = obs.missing
        self.r = np.ascontiguousarray(obs.noise)
        f = scenario.forcing
        self.inputs = f.extended_inputs(np.zeros(len(f))) if extended else f.basic_inputs()
        self.has_data = not obs.missing.all()
        self.t_len = len(obs)


class EnsembleLikelihood:
    """Fast likelihood evaluators over every scenario of an ensemble."""

    def __init__(self, data, p0_delta=1e-6, variance_floor=1e-10):
        self.data = data
        self.p0_delta = float(p0_delta)
        self.floor = float(variance_floor)
        self.scen = [_Series(m.scenario, True) for m in data.members]
        self.abrupt = [None if m.abrupt is None else _Series(m.abrupt, False)
                       for m in data.members]
        self.real = _Series(data.real_world, True)
        self.m0_ext = np.zeros(5)

    def member_has_data(self, m):
        a = self.abrupt[m]
        return self.scen[m].has_data or (a is not None and a.has_data)

    def _values(self, lt):
        lt = np.asarray(lt, dtype=np.float64)
        if not np.all(np.abs(lt) < LOG_BOUND):
            raise NumericalError("log-parameter out of range")
        return np.exp(lt)

    def abrupt_loglik(self, m, lt):
        s = self.abrupt[m]
        if s is None or not s.has_data:
            return 0.0
        v = self._values(lt[:N_BASIC])
        ad, bd, qd, h, p0 = ebm_arrays(v, False, variance_floor=self.floor)
        bu = s.inputs @ bd.T
        m0 = np.array([2.0 * v[10], 0.0, 0.0, 0.0])
        ll, _ = K.kf_loglik(ad, bu, qd, h, s.r, s.y, s.mask, m0, p0)
        return float(ll)

    def extended_filter(self, s, lt, nu, full):
        """Extended filter on series ``s`` with the ``nu`` column set.

        Returns ``(loglik, arrays)`` where ``arrays`` is ``(A_d, kf_full
        output)`` when ``full`` else None.
        """
        v = self._values(lt)
        ad, bd, qd, h, p0 = ebm_arrays(v, True, p0_delta=self.p0_delta, variance_floor=self.floor)
        inp = s.inputs.copy()
        inp[:, 2] = nu[:s.t_len]
        bu = inp @ bd.T
        if full:
            res = K.kf_full(ad, bu, qd, h, s.r, s.y, s.mask, self.m0_ext, p0)
            return float(res[6].sum()), (ad, res)
        ll, _ = K.kf_loglik(ad, bu, qd, h, s.r, s.y, s.mask, self.m0_ext, p0)
        return float(ll), None

    def real_loglik(self, lt, nu):
        if not self.real.has_data:
            return 0.0
        return self.extended_filter(self.real, lt, nu, False)[0]


def _discrepancy_sd(log_sd, floor):
    """``sigma_delta`` with its variance clamped to ``[floor, 1 / floor]``."""
    lim = -0.5 * np.log(floor)
    return np.exp(np.clip(log_sd, -lim, lim))


def _finite_or_raise(v):
    if not np.isfinite(v):
        raise NumericalError("non-finite log-likelihood")
    return v


def _draw_discrepancy_prior(nu, sigma_delta, p0_delta, rng):
    """Random-walk draw ``delta(t) = delta(t-1) + nu(t) + sigma_delta e(t)``."""
    t_len = nu.shape[0]
    z = rng.standard_normal(t_len + 1)
    d0 = np.sqrt(p0_delta) * z[0]
    return d0 + np.cumsum(nu + sigma_delta * z[1:])


def _ffbs_discrepancy(ad, res, rng):
    mps, pps, mfs, pfs = res[0], res[1], res[2], res[3]
    gains, factors, flags = K.ffbs_prepare(ad, mps, pps, mfs, pfs, FFBS_RIDGE)
    z = rng.standard_normal((1, mfs.shape[0], 5))
    draw = K.ffbs_draw(mps, mfs, gains, factors, z)
    return np.ascontiguousarray(draw[0, :, 4]), int(flags)


# ---------------------------------------------------------------------------
# initialization


@dataclass
class MapInfo:
    """Posterior modes and information-based covariances used to start
    every chain. ``ok`` is False where optimization failed and the prior
    mean is used instead."""

    member_x: np.ndarray
    member_cov: np.ndarray
    member_ok: np.ndarray
    real_x: np.ndarray
    real_cov: np.ndarray
    real_ok: bool

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["member_x"]).reshape(-1, N_PARAMS),
                   np.array(d["member_cov"]).reshape(-1, N_PARAMS, N_PARAMS),
                   np.array(d["member_ok"], dtype=bool), np.array(d["real_x"]),
                   np.array(d["real_cov"]), bool(d["real_ok"]))


def _map_one(neg_log_post, x0, prior_cov, maxfev):
    from ..mle import covariance_from_hessian, numerical_hessian

    def f(x):
        try:
            v = neg_log_post(x)
        except (NumericalError, ValidationError, np.linalg.LinAlgError, ZeroDivisionError):
            return np.inf
        return v if np.isfinite(v) else np.inf

    if not np.isfinite(f(x0)):
        return x0.copy(), prior_cov.copy(), False
    res = minimize(f, x0, method="Nelder-Mead",
                   options={"maxfev": maxfev, "xatol": 1e-4, "fatol": 1e-6, "adaptive": True})
    if not np.isfinite(res.fun):
        return x0.copy(), prior_cov.copy(), False
    h = numerical_hessian(f, res.x)
    if not np.all(np.isfinite(h)):
        return res.x, prior_cov.copy(), False
    cov, _ = covariance_from_hessian(h)
    # the information matrix may be near-singular along unidentified
    # directions; never let the start be more diffuse than the prior
    w, v = np.linalg.eigh(cov)
    cap = float(np.linalg.eigvalsh(prior_cov).max())
    cov = (v * np.minimum(w, cap)) @ v.T
    return res.x, 0.5 * (cov + cov.T), True


def map_estimates(data, priors=None, config=None):
    """Per-member and real-world MAP estimates under the hyperprior means
    (``nu = 0``), with inverse-Hessian covariances."""
    priors = HierPriors() if priors is None else priors
    config = McmcConfig() if config is None else config
    lik = EnsembleLikelihood(data, config.p0_delta, config.variance_floor)
    mu0, s0 = priors.mu0, priors.Sigma0
    l0 = np.linalg.cholesky(s0)
    nu0 = np.zeros(data.tau_F)
    m = data.n_members
    xs = np.empty((m, N_PARAMS))
    covs = np.empty((m, N_PARAMS, N_PARAMS))
    oks = np.ones(m, dtype=bool)
    for i in range(m):
        if not lik.member_has_data(i):
            xs[i], covs[i] = mu0, s0
            continue

        def nlp(x, i=i):
            ll = lik.abrupt_loglik(i, x)
            if lik.scen[i].has_data:
                ll += lik.extended_filter(lik.scen[i], x, nu0, False)[0]
            return -(mvn_logpdf_chol(x, mu0, l0) + ll)

        xs[i], covs[i], oks[i] = _map_one(nlp, mu0.copy(), s0, config.map_maxfev)
        if not oks[i]:
            logger.warning("MAP search failed for %s; starting from the prior mean",
                           data.members[i].label)
    kz = priors.kappa * l0
    if lik.real.has_data:
        def nlp_z(x):
            return -(mvn_logpdf_chol(x, mu0, kz) + lik.real_loglik(x, nu0))

        xz, cz, okz = _map_one(nlp_z, mu0.copy(), priors.kappa ** 2 * s0, config.map_maxfev)
    else:
        xz, cz, okz = mu0.copy(), priors.kappa ** 2 * s0, True
    return MapInfo(xs, covs, oks, xz, cz, bool(okz))


def chain_streams(seed, chain, n_chains, n_members):
    """Independent generators of one chain: init, nu, hyper, sigma_nu,
    theta_Z, then one per member."""
    ss = np.random.SeedSequence(seed).spawn(n_chains)[chain]
    gens = [np.random.Generator(np.random.Philox(c)) for c in ss.spawn(5 + n_members)]
    return {"init": gens[0], "nu": gens[1], "hyper": gens[2], "sigma_nu": gens[3],
            "theta_Z": gens[4], "member": gens[5:]}


def initialize_chain(data, priors, rng, map_info=None, config=None, return_proposals=False):
    """Dispersed starting state.

    Member and real-world log-parameters are drawn from normal
    approximations at their MAP estimates. Discrepancies are drawn with
    ``nu = 0``; ``nu`` is set to the increments of their mean path and
    ``sigma_nu`` to the standard deviation of those increments (jittered on
    the log scale). Proposals start at ``2.38^2 / 13`` times the information
    inverse.
    """
    priors = HierPriors() if priors is None else priors
    config = McmcConfig() if config is None else config
    if map_info is None:
        map_info = map_estimates(data, priors, config)
    lik = EnsembleLikelihood(data, config.p0_delta, config.variance_floor)
    m, t_len = data.n_members, data.tau_F
    nu0 = np.zeros(t_len)
    lt = np.empty((m, N_PARAMS))
    delta = np.empty((m, t_len))
    props = []
    flags = []
    for i in range(m):
        x, cov, ok = map_info.member_x[i], map_info.member_cov[i], map_info.member_ok[i]
        if not ok:
            lt[i] = priors.mu0
            props.append(RamProposal.from_cov(priors.Sigma0, config.target_accept))
            flags.append(data.members[i].label)
        else:
            lt[i] = x
            lc = np.linalg.cholesky(cov)
            for _ in range(10):
                cand = x + lc @ rng.standard_normal(N_PARAMS)
                if _member_log_lik(lik, i, cand, nu0) > -np.inf:
                    lt[i] = cand
                    break
            props.append(RamProposal.from_cov(cov, config.target_accept))
        sd = float(_discrepancy_sd(lt[i, 12], config.variance_floor))
        filt = None
        if lik.scen[i].has_data:
            try:
                filt = lik.extended_filter(lik.scen[i], lt[i], nu0, True)[1]
            except NumericalError:
                filt = None
        if filt is not None:
            delta[i] = _ffbs_discrepancy(filt[0], filt[1], rng)[0]
        else:
            delta[i] = _draw_discrepancy_prior(nu0, sd, config.p0_delta, rng)
    s_sigma = np.sqrt(1.0 / (2.0 * t_len))
    if m:
        mean_delta = delta.mean(axis=0)
        nu = np.diff(mean_delta, prepend=0.0)
        sigma_nu = max(float(nu.std()), 1e-8) * np.exp(s_sigma * rng.standard_normal())
    else:
        nu = nu0.copy()
        sigma_nu = float(np.exp(priors.a_nu + np.sqrt(priors.b_nu) * rng.standard_normal()))
    mu_start = lt.mean(axis=0) if m else priors.mu0
    scale, dof = conjugate_sigma_params(lt, mu_start, priors)
    sigma = inverse_wishart(scale, dof, rng)
    mean, cov = conjugate_mu_params(lt, sigma, priors)
    mu = mvn_draw(mean, cov, rng)
    lz = map_info.real_x + np.linalg.cholesky(map_info.real_cov) @ rng.standard_normal(N_PARAMS)
    if lik.real.has_data and not np.isfinite(_real_log_lik(lik, lz, nu)):
        lz = map_info.real_x.copy()
    state = EnsembleState(lt, delta, nu, mu, sigma, sigma_nu, lz)
    if not return_proposals:
        return state
    proposals = {
        "member": props,
        "theta_Z": RamProposal.from_cov(map_info.real_cov, config.target_accept),
        "sigma_nu": RamProposal([[2.38 * s_sigma]], config.target_accept_nu),
    }
    if flags:
        logger.warning("prior-mean starts used for: %s", ", ".join(flags))
    return state, proposals


def _member_log_lik(lik, i, lt, nu):
    try:
        ll = lik.abrupt_loglik(i, lt)
        if lik.scen[i].has_data:
            ll += lik.extended_filter(lik.scen[i], lt, nu, False)[0]
    except (NumericalError, ZeroDivisionError):
        return -np.inf
    return ll if np.isfinite(ll) else -np.inf


def _real_log_lik(lik, lt, nu):
    try:
        ll = lik.real_loglik(lt, nu)
    except (NumericalError, ZeroDivisionError):
        return -np.inf
    return ll if np.isfinite(ll) else -np.inf


# ---------------------------------------------------------------------------
# the chain


class GibbsChain:
    """One Markov chain with its RNG streams, proposals and retained draws."""

    def __init__(self, data, priors, config, state, proposals, streams, chain=0):
        self.data = data
        self.priors = priors
        self.config = config
        self.state = state
        self.proposals = proposals
        self.streams = streams
        self.chain = chain
        self.lik = EnsembleLikelihood(data, config.p0_delta, config.variance_floor)
        self.iteration = 0
        self.trace = None
        m = data.n_members
        self._abrupt_cache = [None] * m
        self.counts = {"accept_theta": [0] * m, "accept_theta_Z": 0, "accept_sigma_nu": 0,
                       "n_post": 0, "fail_theta": [0] * m, "fail_delta": [0] * m,
                       "fail_theta_Z": 0, "ffbs_flags": 0}
        self.draws = {k: [] for k in ("log_theta", "log_theta_Z", "mu", "Sigma", "sigma_nu",
                                      "nu", "delta")}

    @classmethod
    def start(cls, data, priors, config, chain=0, map_info=None):
        streams = chain_streams(config.seed, chain, config.n_chains, data.n_members)
        state, props = initialize_chain(data, priors, streams["init"], map_info, config,
                                        return_proposals=True)
        return cls(data, priors, config, state, props, streams, chain)

    # -- blocks ------------------------------------------------------------

    def _member_target(self, i, chol_sigma, holder):
        lik, st = self.lik, self.state
        has_scen = lik.scen[i].has_data

        def target(x):
            lp = mvn_logpdf_chol(x, st.mu, chol_sigma)
            la = _finite_or_raise(lik.abrupt_loglik(i, x))
            if has_scen:
                le, arrays = lik.extended_filter(lik.scen[i], x, st.nu, True)
                _finite_or_raise(le)
            else:
                le, arrays = 0.0, None
            holder["abrupt"] = la
            holder["arrays"] = arrays
            return lp + la + le

        return target

    def _update_members(self, chol_sigma, adapt, post):
        """Steps (1) and (2)."""
        st, cfg, lik = self.state, self.config, self.lik
        m = st.n_members
        filters = [None] * m
        for i in range(m):
            rng = self.streams["member"][i]
            if not lik.member_has_data(i):
                st.log_theta[i] = st.mu + chol_sigma @ rng.standard_normal(N_PARAMS)
                if post:
                    self.counts["accept_theta"][i] += 1
                self._trace("theta", i)
                continue
            cur = {}
            target = self._member_target(i, chol_sigma, cur)
            try:
                lp_cur = target(st.log_theta[i])
            except (NumericalError, ZeroDivisionError):
                lp_cur = -np.inf
                cur = {"abrupt": None, "arrays": None}
            prop = {}
            res = mh_step(st.log_theta[i], lp_cur, self._member_target(i, chol_sigma, prop),
                          self.proposals["member"][i], rng)
            if res.accepted:
                st.log_theta[i] = res.x
                filters[i] = prop.get("arrays")
                if post:
                    self.counts["accept_theta"][i] += 1
            else:
                filters[i] = cur.get("arrays")
                if not np.isfinite(res.log_alpha) and post:
                    self.counts["fail_theta"][i] += 1
            if adapt:
                ram_adapt(self.proposals["member"][i], res.z, res.alpha)
            self._trace("theta", i)
        for i in range(m):
            rng = self.streams["member"][i]
            if not lik.scen[i].has_data:
                sd = float(_discrepancy_sd(st.log_theta[i, 12], cfg.variance_floor))
                st.delta[i] = _draw_discrepancy_prior(st.nu, sd, cfg.p0_delta, rng)
            elif filters[i] is None:
                self.counts["fail_delta"][i] += 1
            else:
                d, fl = _ffbs_discrepancy(filters[i][0], filters[i][1], rng)
                self.counts["ffbs_flags"] |= fl
                if np.all(np.isfinite(d)):
                    st.delta[i] = d
                else:
                    self.counts["fail_delta"][i] += 1
            self._trace("delta", i)

    def _update_nu(self):
        st, cfg = self.state, self.config
        sd = _discrepancy_sd(st.log_theta[:, 12], cfg.variance_floor)
        st.nu = sample_shared_nu(st.delta, sd, max(st.sigma_nu, np.sqrt(cfg.variance_floor)),
                                 self.streams["nu"], cfg.p0_delta)
        self._trace("nu")

    def _update_hyper(self):
        st = self.state
        st.mu, st.Sigma = conjugate_mu_sigma(st.log_theta, st.Sigma, self.priors,
                                             self.streams["hyper"])
        self._trace("mu")
        self._trace("Sigma")

    def _update_sigma_nu(self, adapt, post):
        st = self.state
        nu = st.nu

        def target(x):
            return sigma_nu_log_target(x[0], nu, self.priors)

        x = np.array([np.log(st.sigma_nu)])
        res = mh_step(x, target(x), target, self.proposals["sigma_nu"], self.streams["sigma_nu"])
        st.sigma_nu = float(np.exp(res.x[0]))
        if res.accepted and post:
            self.counts["accept_sigma_nu"] += 1
        if adapt:
            ram_adapt(self.proposals["sigma_nu"], res.z, res.alpha)
        self._trace("sigma_nu")

    def _update_theta_z(self, chol_sigma, adapt, post):
        st, lik = self.state, self.lik
        rng = self.streams["theta_Z"]
        kchol = self.priors.kappa * chol_sigma
        if not lik.real.has_data:
            st.log_theta_Z = st.mu + kchol @ rng.standard_normal(N_PARAMS)
            if post:
                self.counts["accept_theta_Z"] += 1
            self._trace("theta_Z")
            return
        nu = st.nu

        def target(x):
            return mvn_logpdf_chol(x, st.mu, kchol) + _finite_or_raise(lik.real_loglik(x, nu))

        try:
            cur = target(st.log_theta_Z)
        except (NumericalError, ZeroDivisionError):
            cur = -np.inf
        res = mh_step(st.log_theta_Z, cur, target, self.proposals["theta_Z"], rng)
        st.log_theta_Z = res.x
        if post:
            if res.accepted:
                self.counts["accept_theta_Z"] += 1
            elif not np.isfinite(res.log_alpha):
                self.counts["fail_theta_Z"] += 1
        if adapt:
            ram_adapt(self.proposals["theta_Z"], res.z, res.alpha)
        self._trace("theta_Z")

    def _trace(self, step, member=None):
        if self.trace is not None:
            self.trace.append(step if member is None else (step, member))

    # -- driver ------------------------------------------------------------

    def sweep(self):
        """Advance the chain by one full Gibbs sweep."""
        self.iteration += 1
        cfg = self.config
        adapt = self.iteration <= cfg.burn_in
        post = not adapt
        if not adapt:
            for p in self._all_proposals():
                p.frozen = True
        chol_sigma = np.linalg.cholesky(self.state.Sigma)
        self._update_members(chol_sigma, adapt, post)
        self._update_nu()
        self._update_hyper()
        self._update_sigma_nu(adapt, post)
        self._update_theta_z(np.linalg.cholesky(self.state.Sigma), adapt, post)
        if post:
            self.counts["n_post"] += 1
            if (self.iteration - cfg.burn_in) % cfg.thin == 0:
                self._retain()

    def _all_proposals(self):
        return list(self.proposals["member"]) + [self.proposals["theta_Z"],
                                                 self.proposals["sigma_nu"]]

    def _retain(self):
        st = self.state
        self.draws["log_theta"].append(st.log_theta.copy())
        self.draws["log_theta_Z"].append(st.log_theta_Z.copy())
        self.draws["mu"].append(st.mu.copy())
        self.draws["Sigma"].append(st.Sigma.copy())
        self.draws["sigma_nu"].append(st.sigma_nu)
        self.draws["nu"].append(st.nu.copy())
        if self.config.store_delta:
            self.draws["delta"].append(st.delta.copy())

    @property
    def done(self):
        return self.iteration >= self.config.n_total

    def run(self, checkpoint_path=None, stop_after=None):
        """Sweep until the schedule is complete (or ``stop_after`` sweeps in
        total), checkpointing every ``checkpoint_every`` sweeps."""
        every = self.config.checkpoint_every
        end = self.config.n_total if stop_after is None else min(stop_after, self.config.n_total)
        while self.iteration < end:
            self.sweep()
            if checkpoint_path and self.iteration % every == 0:
                self.save(checkpoint_path)
        if checkpoint_path:
            self.save(checkpoint_path)
        return self

    def acceptance(self):
        n = max(self.counts["n_post"], 1)
        return {"theta": np.array(self.counts["accept_theta"]) / n,
                "theta_Z": self.counts["accept_theta_Z"] / n,
                "sigma_nu": self.counts["accept_sigma_nu"] / n}

    def draw_arrays(self):
        m, t = self.state.n_members, self.data.tau_F
        shapes = {"log_theta": (m, N_PARAMS), "log_theta_Z": (N_PARAMS,), "mu": (N_PARAMS,),
                  "Sigma": (N_PARAMS, N_PARAMS), "sigma_nu": (), "nu": (t,), "delta": (m, t)}
        out = {}
        for k, shp in shapes.items():
            v = self.draws[k]
            out[k] = np.array(v, dtype=np.float64).reshape((len(v),) + shp)
        return out

    # -- checkpointing -----------------------------------------------------

    def fingerprint(self):
        cfg = asdict(self.config)
        cfg.pop("checkpoint_every")
        return {"config": cfg, "labels": self.data.labels, "tau_F": self.data.tau_F,
                "tau_H": self.data.tau_H, "priors": self.priors.to_dict()}

    def to_checkpoint(self):
        body = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "fingerprint": self.fingerprint(),
            "chain": self.chain,
            "iteration": self.iteration,
            "state": self.state.to_dict(),
            "proposals": {"member": [p.to_dict() for p in self.proposals["member"]],
                          "theta_Z": self.proposals["theta_Z"].to_dict(),
                          "sigma_nu": self.proposals["sigma_nu"].to_dict()},
            "rng": {k: ([generator_state(g) for g in v] if isinstance(v, list)
                        else generator_state(v)) for k, v in self.streams.items()},
            "counts": self.counts,
            "draws": {k: [np.asarray(x).tolist() for x in v] for k, v in self.draws.items()},
        }
        return {k: body[k] for k in CHECKPOINT_FIELDS}

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.to_checkpoint(), fh)
        os.replace(tmp, path)

    @classmethod
    def from_checkpoint(cls, body, data, priors, config):
        if body.get("format") != CHECKPOINT_FORMAT:
            raise ValidationError("not a chain checkpoint")
        if body.get("version") != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {body.get('version')}")
        state = EnsembleState.from_dict(body["state"])
        props = {"member": [RamProposal.from_dict(p) for p in body["proposals"]["member"]],
                 "theta_Z": RamProposal.from_dict(body["proposals"]["theta_Z"]),
                 "sigma_nu": RamProposal.from_dict(body["proposals"]["sigma_nu"])}
        streams = {k: ([restore_generator(s) for s in v] if isinstance(v, list)
                       else restore_generator(v)) for k, v in body["rng"].items()}
        chain = cls(data, priors, config, state, props, streams, body["chain"])
        if body["fingerprint"] != json.loads(json.dumps(chain.fingerprint())):
            raise ValidationError("checkpoint was written for a different configuration")
        chain.iteration = int(body["iteration"])
        chain.counts = body["counts"]
        chain.draws = {k: [np.asarray(x) if isinstance(x, list) else x for x in v]
                       for k, v in body["draws"].items()}
        return chain

    @classmethod
    def load(cls, path, data, priors, config):
        with open(path) as fh:
            body = json.load(fh)
        return cls.from_checkpoint(body, data, priors, config)


# ---------------------------------------------------------------------------
# multi-chain driver


def _checkpoint_path(directory, chain):
    return None if directory is None else os.path.join(directory, f"chain_{chain:02d}.json")


def _run_one(data, priors, config, chain, map_info, checkpoint_dir, resume, stop_after):
    t0 = time.perf_counter()
    path = _checkpoint_path(checkpoint_dir, chain)
    try:
        if resume and path and os.path.exists(path):
            gc = GibbsChain.load(path, data, priors, config)
        else:
            gc = GibbsChain.start(data, priors, config, chain, map_info)
        gc.run(path, stop_after)
    except Exception as exc:  # a failing chain must not take the others down
        logger.exception("chain %d failed", chain)
        return {"chain": chain, "error": f"{type(exc).__name__}: {exc}"}
    return {"chain": chain, "draws": gc.draw_arrays(), "acceptance": gc.acceptance(),
            "counts": gc.counts, "iteration": gc.iteration, "done": gc.done,
            "wall_seconds": time.perf_counter() - t0,
            "ram_skipped": [p.n_skipped for p in gc._all_proposals()]}


def run_chains(data, priors=None, config=None, n_jobs=1, checkpoint_dir=None, resume=False,
               stop_after=None, map_info=None):
    """Run ``config.n_chains`` independent chains.

    Chains use streams spawned from ``config.seed``, so results do not
    depend on ``n_jobs``. Failed chains are dropped from the draws and
    described in ``failures``.

    Returns
    -------
    ChainOutput
    """
    priors = HierPriors() if priors is None else priors
    config = McmcConfig() if config is None else config
    if checkpoint_dir:
        os.makedirs(checkpoint_dir, exist_ok=True)
    need_map = map_info is None and not (
        resume and checkpoint_dir and all(
            os.path.exists(_checkpoint_path(checkpoint_dir, c)) for c in range(config.n_chains)))
    if need_map:
        map_info = map_estimates(data, priors, config)
    args = [(data, priors, config, c, map_info, checkpoint_dir, resume, stop_after)
            for c in range(config.n_chains)]
    if n_jobs > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(n_jobs, config.n_chains)) as ex:
            results = list(ex.map(_run_one, *zip(*args)))
    else:
        results = [_run_one(*a) for a in args]
    return assemble_output(results, data, config)


def assemble_output(results, data, config):
    good = [r for r in results if "error" not in r]
    failures = [{"chain": r["chain"], "error": r["error"]} for r in results if "error" in r]
    for r in good:
        c = r["counts"]
        if any(c["fail_theta"]) or any(c["fail_delta"]) or c["fail_theta_Z"]:
            failures.append({"chain": r["chain"], "rejected_evaluations": {
                "theta": c["fail_theta"], "delta": c["fail_delta"],
                "theta_Z": c["fail_theta_Z"]}})
    if not good:
        raise NumericalError("every chain failed", failures=failures)
    n_keep = min(r["draws"]["mu"].shape[0] for r in good)
    draws = {}
    for k in good[0]["draws"]:
        draws[k] = np.stack([r["draws"][k][:n_keep] for r in good])
    acceptance = {k: np.array([r["acceptance"][k] for r in good]) for k in good[0]["acceptance"]}
    out = ChainOutput(draws, acceptance, data.labels, failures=failures,
                      meta={"chains": [r["chain"] for r in good],
                            "wall_seconds": [r["wall_seconds"] for r in good],
                            "complete": all(r["done"] for r in good),
                            "iterations": [r["iteration"] for r in good],
                            "ram_skipped": [r["ram_skipped"] for r in good],
                            "tau_H": data.tau_H, "tau_F": data.tau_F})
    if n_keep >= 4:
        out.rhat = rhat_table(out)
    return out
