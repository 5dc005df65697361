"""Pipeline stages behind the command-line interface.

Every stage takes a validated :class:`RunConfig`, an output directory and a
seed, and writes byte-stable files (no timestamps; floats in round-trip
form). Timing goes to the log only.
"""
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from ..ebm import PARAM_NAMES, BASIC_NAMES, ForcingSeries, ScenarioData, ecs
from ..exceptions import ConvergenceError, NumericalError, ValidationError
from ..hier.diagnostics import effective_sample_size, rhat_table
from ..hier.sampler import run_chains
from ..hier.state import ChainOutput, EnsembleData, MemberData
from ..kalman import ObservationSeries
from ..mle import fit_abrupt, project_mle, standardised_errors
from ..projection import (QUANTILE_LEVELS, anomaly_stats, ecs_posterior, exceedance_curve,
                          project_real_world, quantile_table)
from . import io
from .synthetic import generate_ensemble, synthetic_forcing

logger = logging.getLogger(__name__)

RHAT_LIMIT = 1.1
COVERAGE_Z = 2.0


# ---------------------------------------------------------------------------
# data assembly


@dataclass
class LoadedData:
    ensemble: EnsembleData
    forcing: ForcingSeries
    years: np.ndarray
    tau_H: int

    @property
    def future_forcing(self):
        return self.forcing.slice(self.tau_H, len(self.forcing))


def _abrupt(label, path, factor):
    years, vals = io.read_scenario_csv(path)
    return ScenarioData(label + "-abrupt", ObservationSeries(vals, times=years),
                        ForcingSeries(np.full(len(years), factor), times=years))


def load_data(cfg, obs_override=None):
    """Read and cross-check every input file before any computation.

    ``obs_override`` replaces the observation file by a ScenarioData (used
    for cross-validation).
    """
    missing = [p for p in cfg.referenced_files() if not os.path.isfile(p)]
    if missing:
        raise ValidationError(f"{missing[0]}: file not found")
    if not cfg.forcing:
        raise ValidationError("config: forcing file is required")
    years, fco2, fvolc = io.read_forcing_csv(cfg.path(cfg.forcing))
    if cfg.horizon_end is not None:
        if cfg.horizon_end not in years:
            raise ValidationError(f"horizon_end {cfg.horizon_end} outside the forcing years")
        keep = years <= cfg.horizon_end
        years, fco2, fvolc = years[keep], fco2[keep], fvolc[keep]
    if cfg.hist_end is None or cfg.hist_end not in years:
        raise ValidationError("config: hist_end must be a year covered by the forcing file")
    tau_H = int(np.flatnonzero(years == cfg.hist_end)[0]) + 1
    if np.any(fvolc[tau_H:] != 0):
        raise ValidationError(f"{cfg.path(cfg.forcing)}: fvolc must be zero after hist_end")
    forcing = ForcingSeries(fco2, fvolc, times=years)
    members = []
    for spec in cfg.members:
        path = cfg.path(spec.scenario)
        y_years, vals = io.read_scenario_csv(path)
        if y_years[0] != years[0] or len(y_years) < len(years):
            raise ValidationError(f"{path}: must cover years {years[0]}-{years[-1]}")
        vals = vals[:len(years)]
        scen = ScenarioData(spec.label, ObservationSeries(vals, times=years), forcing, tau_H=tau_H)
        abrupt = _abrupt(spec.label, cfg.path(spec.abrupt), cfg.abrupt_factor) if spec.abrupt else None
        members.append(MemberData(spec.label, scen, abrupt))
    if obs_override is not None:
        real = obs_override
    else:
        if not cfg.observations:
            raise ValidationError("config: observations file is required")
        path = cfg.path(cfg.observations)
        o_years, tas, sd = io.read_observation_csv(path)
        if o_years[0] != years[0] or len(o_years) < tau_H:
            raise ValidationError(f"{path}: must cover years {years[0]}-{cfg.hist_end}")
        real = _real_world(tas[:tau_H], sd[:tau_H], forcing.slice(0, tau_H))
    return LoadedData(EnsembleData(members, real, len(years)), forcing, years, tau_H)


def _real_world(tas, sd, hist_forcing):
    t = len(tas)
    noise = np.zeros((t, 2, 2))
    noise[:, 0, 0] = np.asarray(sd) ** 2
    obs = np.column_stack([tas, np.full(t, np.nan)])
    return ScenarioData("real_world", ObservationSeries(obs, noise=noise, times=hist_forcing.times),
                        hist_forcing)


# ---------------------------------------------------------------------------
# simulate-synthetic


def simulate_synthetic(cfg, out, seed=None):
    """Write a synthetic ensemble and a config pointing at it."""
    sc = cfg.synthetic
    seed = sc.seed if seed is None else seed
    ss = np.random.SeedSequence(seed)
    g_force, g_ens = [np.random.Generator(np.random.Philox(c)) for c in ss.spawn(2)]
    forcing = synthetic_forcing(sc.tau_H, sc.tau_F, sc.start_year, sc.final_factor, g_force)
    data, truth = generate_ensemble(sc.log_mu(), np.diag(sc.Sigma_diag), sc.sigma_nu,
                                    sc.n_members, forcing, sc.tau_H, sc.abrupt_len, sc.obs_sd,
                                    sc.kappa, g_ens, zero_variability=sc.zero_variability,
                                    nu_drift=sc.discrepancy_ramp)
    os.makedirs(out, exist_ok=True)
    years = forcing.times
    io.write_forcing_csv(os.path.join(out, "forcing.csv"), years, forcing.f_C, forcing.f_V)
    members = []
    for m in data.members:
        scen = f"{m.label}_scenario.csv"
        io.write_scenario_csv(os.path.join(out, scen), years, m.scenario.obs.as_nan())
        entry = {"label": m.label, "scenario": scen}
        if m.abrupt is not None:
            ab = f"{m.label}_abrupt.csv"
            io.write_scenario_csv(os.path.join(out, ab), m.abrupt.obs.times, m.abrupt.obs.as_nan())
            entry["abrupt"] = ab
        members.append(entry)
    hist_years = years[:sc.tau_H]
    io.write_observation_csv(os.path.join(out, "observations.csv"), hist_years,
                             data.real_world.obs.as_nan()[:, 0], np.full(sc.tau_H, sc.obs_sd))
    io.write_scenario_csv(os.path.join(out, "real_world_truth.csv"), years,
                          np.asarray(truth.meta["real_world_full"]))
    manifest = truth.to_dict()
    manifest["meta"] = {"seed": seed, "labels": data.labels, "tau_H": sc.tau_H,
                        "tau_F": sc.tau_F, "param_names": list(PARAM_NAMES)}
    io.write_json(os.path.join(out, "truth.json"), manifest)
    generated = {"members": members, "observations": "observations.csv",
                 "forcing": "forcing.csv", "hist_end": int(years[sc.tau_H - 1]),
                 "horizon_end": int(years[-1])}
    with open(os.path.join(out, "dataset.yaml"), "w") as fh:
        yaml.safe_dump(generated, fh, sort_keys=True)
    return data, truth


# ---------------------------------------------------------------------------
# fit-abrupt and mle-demo


def _abrupt_members(cfg, loaded):
    ms = [m for m in loaded.ensemble.members if m.abrupt is not None]
    if not ms:
        raise ValidationError("no ensemble member has an abrupt file")
    return ms


def fit_abrupt_all(cfg, out, seed=0):
    loaded = load_data(cfg)
    rows = []
    fits = {}
    for i, m in enumerate(_abrupt_members(cfg, loaded)):
        fit = fit_abrupt(m.abrupt, n_restarts=cfg.mle_demo.n_restarts, rng=seed + i,
                         maxfev=cfg.mle_demo.maxfev)
        fits[m.label] = fit
        sd = fit.log_theta_sd
        for j, name in enumerate(BASIC_NAMES):
            rows.append((m.label, name, getattr(fit.theta_hat, name), sd[j]))
        rows.append((m.label, "loglik", fit.loglik_at_max, np.nan))
        rows.append((m.label, "converged", float(fit.converged), np.nan))
    io.write_csv(os.path.join(out, "mle_fits.csv"), ("member", "parameter", "estimate", "log_sd"),
                 rows)
    return fits


def mle_demo(cfg, out, seed=0):
    """Fit each member's abrupt run, project its historical/future forcing
    and score the projection against the member's own output."""
    loaded = load_data(cfg)
    members = _abrupt_members(cfg, loaded)
    years = loaded.years
    report = {}
    zs = []
    for i, m in enumerate(members):
        ss = np.random.SeedSequence([seed, i])
        g_fit, g_proj = [np.random.Generator(np.random.Philox(c)) for c in ss.spawn(2)]
        fit = fit_abrupt(m.abrupt, n_restarts=cfg.mle_demo.n_restarts, rng=g_fit,
                         maxfev=cfg.mle_demo.maxfev)
        ens = project_mle(fit, loaded.forcing, cfg.mle_demo.n_samples, g_proj)
        z, flag = standardised_errors(m.scenario.obs.as_nan(), ens, return_flag=True)
        zs.append(z)
        io.write_csv(os.path.join(out, f"mle_demo_{m.label}.csv"), ("year", "z_tas", "z_rndt"),
                     [(int(y), a, b) for y, (a, b) in zip(years, z)])
        half = len(years) // 2
        report[m.label] = {
            "loglik": fit.loglik_at_max, "converged": fit.converged,
            "ecs": ecs(fit.theta_hat), "infinite_z": flag,
            "mean_z_tas": float(np.nanmean(z[:, 0])), "mean_z_rndt": float(np.nanmean(z[:, 1])),
            "late_mean_z_tas": float(np.nanmean(z[half:, 0])),
            "late_mean_z_rndt": float(np.nanmean(z[half:, 1])),
            "fraction_within_2": float(np.mean(np.abs(z[~np.isnan(z)]) <= COVERAGE_Z)),
        }
    mean_z = np.nanmean(np.stack(zs), axis=0)
    io.write_csv(os.path.join(out, "mle_demo_ensemble_mean.csv"), ("year", "z_tas", "z_rndt"),
                 [(int(y), a, b) for y, (a, b) in zip(years, mean_z)])
    io.write_json(os.path.join(out, "mle_demo_report.json"), report)
    return report, mean_z


# ---------------------------------------------------------------------------
# fit-hier and the posterior store


def posterior_columns(labels, years):
    cols = ["chain", "draw"]
    for lab in labels:
        cols += [f"log_{p}[{lab}]" for p in PARAM_NAMES]
    cols += [f"log_{p}[Z]" for p in PARAM_NAMES]
    cols += ["sigma_nu"]
    cols += [f"mu[{p}]" for p in PARAM_NAMES]
    n = len(PARAM_NAMES)
    cols += [f"Sigma[{PARAM_NAMES[i]},{PARAM_NAMES[j]}]" for i in range(n) for j in range(i, n)]
    cols += [f"nu[{int(y)}]" for y in years]
    return cols


def write_posterior(path, output, years):
    d = output.draws
    c, n_draws = output.n_chains, output.n_draws
    iu = np.triu_indices(len(PARAM_NAMES))
    rows = []
    for ci in range(c):
        for k in range(n_draws):
            row = [output.meta["chains"][ci] if "chains" in output.meta else ci, k]
            row += d["log_theta"][ci, k].ravel().tolist()
            row += d["log_theta_Z"][ci, k].tolist()
            row.append(float(d["sigma_nu"][ci, k]))
            row += d["mu"][ci, k].tolist()
            row += d["Sigma"][ci, k][iu].tolist()
            row += d["nu"][ci, k].tolist()
            rows.append(row)
    io.write_csv(path, posterior_columns(output.labels, years), rows)


def read_posterior(path):
    """Rebuild a ChainOutput (draws only) from a posterior CSV."""
    import csv

    if not os.path.isfile(path):
        raise ValidationError(f"{path}: posterior store not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(x) for x in row] for row in reader])
    if data.size == 0:
        raise ValidationError(f"{path}: no draws")
    labels = []
    for h in header:
        if h.startswith(f"log_{PARAM_NAMES[0]}[") and not h.endswith("[Z]"):
            labels.append(h[len(f"log_{PARAM_NAMES[0]}["):-1])
    n = len(PARAM_NAMES)
    m = len(labels)
    years = [int(h[3:-1]) for h in header if h.startswith("nu[")]
    chains = data[:, 0].astype(int)
    uniq = sorted(set(chains.tolist()))
    per = [data[chains == c] for c in uniq]
    n_draws = min(len(p) for p in per)
    arr = np.stack([p[:n_draws] for p in per])
    pos = 2
    lt = arr[:, :, pos:pos + m * n].reshape(len(uniq), n_draws, m, n)
    pos += m * n
    lz = arr[:, :, pos:pos + n]
    pos += n
    sig_nu = arr[:, :, pos]
    pos += 1
    mu = arr[:, :, pos:pos + n]
    pos += n
    k = n * (n + 1) // 2
    tri = arr[:, :, pos:pos + k]
    pos += k
    iu = np.triu_indices(n)
    sigma = np.zeros((len(uniq), n_draws, n, n))
    sigma[:, :, iu[0], iu[1]] = tri
    sigma[:, :, iu[1], iu[0]] = tri
    nu = arr[:, :, pos:pos + len(years)]
    draws = {"log_theta": lt, "log_theta_Z": lz, "sigma_nu": sig_nu, "mu": mu, "Sigma": sigma,
             "nu": nu}
    return ChainOutput(draws, {}, labels, meta={"chains": uniq, "years": years})


def diagnostics_report(output):
    rh = output.rhat or rhat_table(output)
    summaries = output.summaries()
    ess = {k: float(sum(effective_sample_size(ch) for ch in v)) for k, v in summaries.items()}
    bad = sorted(k for k, v in rh.items() if output.is_hyperparameter(k) and not v <= RHAT_LIMIT)
    acc = {k: np.asarray(v).tolist() for k, v in output.acceptance.items()}
    return {"rhat": rh, "ess": ess, "acceptance": acc, "hyperparameters_not_converged": bad,
            "n_chains": output.n_chains, "draws_per_chain": output.n_draws,
            "failures": output.failures, "complete": output.meta.get("complete", True)}


def fit_hier(cfg, out, seed=None, threads=1, resume=False):
    """Run the sampler and write posterior.csv, diagnostics.json and
    per-chain checkpoints. Returns ``(output, report)``."""
    loaded = load_data(cfg)
    mcmc = cfg.mcmc.build(seed)
    priors = cfg.priors.build()
    ckpt = os.path.join(out, "checkpoint")
    output = run_chains(loaded.ensemble, priors, mcmc, n_jobs=threads, checkpoint_dir=ckpt,
                        resume=resume)
    logger.info("chain wall-clock seconds: %s", output.meta.get("wall_seconds"))
    write_posterior(os.path.join(out, "posterior.csv"), output, loaded.years)
    report = diagnostics_report(output)
    io.write_json(os.path.join(out, "diagnostics.json"), report)
    rows = sorted(report["rhat"].items())
    io.write_csv(os.path.join(out, "rhat.csv"), ("summary", "rhat"), rows)
    return output, report


# ---------------------------------------------------------------------------
# project


def project(cfg, out, posterior_path=None, seed=0):
    loaded = load_data(cfg)
    posterior_path = posterior_path or os.path.join(out, "posterior.csv")
    post = read_posterior(posterior_path)
    if post.draws["nu"].shape[2] != len(loaded.years):
        raise ValidationError(f"{posterior_path}: nu covers {post.draws['nu'].shape[2]} years, "
                              f"the configured horizon has {len(loaded.years)}")
    if post.meta["years"] != [int(y) for y in loaded.years]:
        raise ValidationError(f"{posterior_path}: posterior years do not match the configuration")
    ss = np.random.SeedSequence(seed)
    g_proj, g_ecs = [np.random.Generator(np.random.Philox(c)) for c in ss.spawn(2)]
    pc = cfg.projection
    ens = project_real_world(post, loaded.ensemble.real_world, loaded.future_forcing, g_proj,
                             cfg.mcmc.p0_delta, pc.obs_noise_sd, history="observed"
                             if pc.history == "observed" else ("state" if pc.history else None))
    write_projection_outputs(out, ens, pc, loaded, post, g_ecs)
    return ens


def write_projection_outputs(out, ens, pc, loaded, post, g_ecs):
    hdr = ("year",) + tuple(f"q{int(round(100 * q)):02d}" for q in QUANTILE_LEVELS)
    for v, name in ((0, "tas"), (1, "rndt")):
        io.write_csv(os.path.join(out, f"projection_quantiles_{name}.csv"), hdr,
                     [(int(r[0]),) + tuple(r[1:]) for r in quantile_table(ens, variable=v)])
    obs_t1 = loaded.ensemble.real_world.obs.as_nan()[:, 0]
    hist_years = loaded.years[:loaded.tau_H]
    anomalies = {}
    for w in pc.windows:
        ref_in_hist = w.reference[1] <= hist_years[-1]
        if ref_in_hist:
            ref_vals = obs_t1
            if np.any(np.isnan(ref_vals[(hist_years >= w.reference[0]) & (hist_years <= w.reference[1])])):
                raise ValidationError(f"reference window {w.reference} has missing observations")
            st = anomaly_stats(ens, w.window, w.reference, ref_vals, hist_years)
        else:
            st = anomaly_stats(ens, w.window, w.reference)
        st.pop("samples")
        anomalies[w.name] = st
    io.write_json(os.path.join(out, "anomalies.json"), anomalies)
    offset = 0.0
    if pc.preindustrial is not None:
        sel = (hist_years >= pc.preindustrial[0]) & (hist_years <= pc.preindustrial[1])
        if not sel.any() or np.any(np.isnan(obs_t1[sel])):
            raise ValidationError("pre-industrial window must be fully observed")
        offset = float(obs_t1[sel].mean())
    rows = []
    curves = [exceedance_curve(ens, th, offset) for th in pc.thresholds]
    for k, y in enumerate(ens.times):
        rows.append((int(y),) + tuple(c[k] for c in curves))
    io.write_csv(os.path.join(out, "exceedance.csv"),
                 ("year",) + tuple(f"p_gt_{th:g}K" for th in pc.thresholds), rows)
    ecs_rw = ecs_posterior(post, "real_world")
    io.write_csv(os.path.join(out, "ecs_real_world.csv"), ("ecs",), [(v,) for v in ecs_rw])
    ecs_new = ecs_posterior(post, "new_model", g_ecs)
    io.write_csv(os.path.join(out, "ecs_new_model.csv"), ("ecs",), [(v,) for v in ecs_new])


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CvReport:
    """Leave-one-out standardised errors over the projection period."""

    labels: list
    years: np.ndarray
    z: dict = field(default_factory=dict)
    failed: dict = field(default_factory=dict)

    def _stack(self):
        ok = [lab for lab in self.labels if lab in self.z]
        if not ok:
            return np.empty((0, len(self.years), 2))
        return np.stack([self.z[lab] for lab in ok])

    @property
    def coverage_by_year(self):
        s = self._stack()
        with np.errstate(invalid="ignore"):
            return np.nanmean(np.abs(s) <= COVERAGE_Z, axis=0)

    @property
    def coverage_overall(self):
        s = self._stack()
        v = s[~np.isnan(s)]
        return float(np.mean(np.abs(v) <= COVERAGE_Z)) if v.size else float("nan")

    @property
    def mean_bias(self):
        return np.nanmean(self._stack(), axis=0)

    def to_dict(self):
        return {"labels": self.labels, "years": self.years.tolist(),
                "coverage_overall": self.coverage_overall,
                "coverage_by_year": self.coverage_by_year.tolist(),
                "mean_bias": self.mean_bias.tolist(),
                "max_abs_mean_bias": float(np.nanmax(np.abs(self.mean_bias))),
                "failed": self.failed}


def _cv_fold(cfg, loaded, k, seed, threads):
    held = loaded.ensemble.members[k]
    others = [m for i, m in enumerate(loaded.ensemble.members) if i != k]
    tau_H = loaded.tau_H
    t1 = held.scenario.obs.as_nan()[:tau_H, 0]
    real = _real_world(t1, np.full(tau_H, cfg.cv.obs_sd), loaded.forcing.slice(0, tau_H))
    data = EnsembleData(others, real, loaded.ensemble.tau_F)
    mcmc = cfg.cv.mcmc.build(seed)
    priors = cfg.priors.build()
    output = run_chains(data, priors, mcmc, n_jobs=threads)
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k, 1])))
    ens = project_real_world(output, real, loaded.future_forcing, g, mcmc.p0_delta, 0.0)
    truth = held.scenario.obs.as_nan()[tau_H:]
    z = standardised_errors(truth, ens)
    return z, diagnostics_report(output)


def cross_validate(cfg, out, seed=None, threads=1):
    """Leave-one-out refits: each member's historical T1 stands in for the
    observations and its own future output is the truth."""
    loaded = load_data(cfg)
    members = loaded.ensemble.members
    if len(members) < 2:
        raise ValidationError("cross-validation needs at least two members")
    seed = cfg.cv.mcmc.seed if seed is None else seed
    years = loaded.years[loaded.tau_H:]
    report = CvReport([m.label for m in members], years)
    diags = {}
    for k, m in enumerate(members):
        try:
            z, diag = _cv_fold(cfg, loaded, k, seed, threads)
        except (NumericalError, ConvergenceError) as exc:
            report.failed[m.label] = f"{type(exc).__name__}: {exc}"
            continue
        report.z[m.label] = z
        diags[m.label] = {"rhat_max_hyper": max(
            (v for kk, v in diag["rhat"].items() if kk.startswith(("mu_", "log_Sigma", "log_sigma"))),
            default=float("nan")), "acceptance": diag["acceptance"]}
    rows = []
    for lab in report.labels:
        if lab in report.z:
            rows += [(lab, int(y), a, b) for y, (a, b) in zip(years, report.z[lab])]
    io.write_csv(os.path.join(out, "cv_z.csv"), ("member", "year", "z_tas", "z_rndt"), rows)
    cov, mb = report.coverage_by_year, report.mean_bias
    io.write_csv(os.path.join(out, "cv_summary.csv"),
                 ("year", "coverage_tas", "coverage_rndt", "mean_z_tas", "mean_z_rndt"),
                 [(int(y), cov[i, 0], cov[i, 1], mb[i, 0], mb[i, 1]) for i, y in enumerate(years)])
    body = report.to_dict()
    body["folds"] = diags
    io.write_json(os.path.join(out, "cv_report.json"), body)
    return report


def diagnostics(cfg, out, posterior_path=None):
    post = read_posterior(posterior_path or os.path.join(out, "posterior.csv"))
    report = diagnostics_report(post)
    io.write_json(os.path.join(out, "diagnostics_recomputed.json"), report)
    return report
