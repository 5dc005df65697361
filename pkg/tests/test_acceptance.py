"""Desk-scale acceptance criteria 1-11.

Each test records one ``PASS``/``FAIL`` line (shown in the terminal
summary) with the measured quantity and wall time, then asserts the
criterion at its stated tolerance and runtime budget.
"""
import filecmp
import os
import time

import numpy as np
import pytest
import yaml
from scipy import stats

from oracles import (joint_loglik, joint_smoother, moment_z_scores, nu_conditional,
                     rk4_propagator)
from stochebm.ebm import (ForcingSeries, ScenarioData, build_basic_system,
                          build_extended_system, continuous_basic, continuous_extended,
                          simulate, table2_params)
from stochebm.harness.cli import EXIT_CONVERGENCE, EXIT_OK, main
from stochebm.harness.config import load_config
from stochebm.harness.pipeline import cross_validate, mle_demo
from stochebm.hier import (EnsembleData, HierPriors, McmcConfig, MemberData, RamProposal,
                           conjugate_mu_params, conjugate_mu_sigma, conjugate_sigma_params,
                           mh_step, ram_adapt, run_chains, sample_shared_nu)
from stochebm.kalman import ObservationSeries, ffbs_sample, kalman_filter, loglik
from stochebm.lds import LinearGaussianSSM
from stochebm.mle import fit_abrupt

TINY = 1e-200


def gen(seed):
    return np.random.Generator(np.random.Philox(seed))


class Verdict:
    """Times a criterion and records its verdict line."""

    def __init__(self, log, number, budget):
        self.log, self.number, self.budget = log, number, budget

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        return False

    def finish(self, ok, detail):
        elapsed = time.perf_counter() - self.start
        ok = bool(ok) and elapsed < self.budget
        line = (f"criterion {self.number}: {'PASS' if ok else 'FAIL'}  {detail}  "
                f"[{elapsed:.1f} s, budget {self.budget:g} s]")
        self.log.append(line)
        print(line)
        assert ok, line


def test_c01_discretization_exact(acceptance_log):
    with Verdict(acceptance_log, 1, 5) as v:
        rng = gen(1)
        worst = 0.0
        for row in ("HadGEM2-ES", "Observations"):
            theta = table2_params(row).replace(sigma_F=TINY, sigma_T=TINY, sigma_delta=TINY)
            f_c = np.cumsum(rng.uniform(0.0, 0.04, 200))
            cases = [
                (build_basic_system(theta), continuous_basic(theta), f_c[:, None]),
                (build_extended_system(theta), continuous_extended(theta),
                 np.column_stack([f_c, rng.exponential(0.05, 200) * (rng.random(200) < 0.1),
                                  0.01 * rng.standard_normal(200)])),
            ]
            for ssm, cont, inputs in cases:
                p, g = rk4_propagator(cont.A, cont.B)
                x = y = ssm.m0.copy()
                for u in inputs:
                    x = ssm.A_d @ x + ssm.B_d @ u
                    y = p @ y + g @ u
                    worst = max(worst, np.abs(x - y).max())
        v.finish(worst < 1e-8, f"max |discrete - ODE| = {worst:.2e} (tol 1e-8)")


def random_system(rng, n, q, t_len):
    a = rng.standard_normal((n, n))
    a *= 0.9 / max(np.abs(np.linalg.eigvals(a)).max(), 1e-3)
    lq = 0.3 * rng.standard_normal((n, n))
    lr = 0.3 * rng.standard_normal((q, q))
    lp = rng.standard_normal((n, n))
    ssm = LinearGaussianSSM(a, rng.standard_normal((n, 2)), lq @ lq.T,
                            rng.standard_normal((q, n)), lr @ lr.T, rng.standard_normal(n),
                            lp @ lp.T)
    return ssm, rng.standard_normal((t_len, 2))


def oracle_args(ssm, inputs, t_len):
    return (ssm.A_d, inputs @ ssm.B_d.T, ssm.Q_d, ssm.H_d, ssm.noise_stack(t_len), ssm.m0,
            ssm.P0)


def test_c02_likelihood_oracle(acceptance_log):
    with Verdict(acceptance_log, 2, 10) as v:
        rng = gen(2)
        worst = 0.0
        for k in range(20):
            n, q, t_len = rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 13)
            ssm, inputs = random_system(rng, n, q, t_len)
            y = rng.standard_normal((t_len, q))
            # half the systems carry missing entries
            miss = rng.random((t_len, q)) < (0.4 if k % 2 else 0.0)
            ref = joint_loglik(*oracle_args(ssm, inputs, t_len), y, miss)
            got = loglik(ssm, inputs, ObservationSeries(np.where(miss, np.nan, y)))
            worst = max(worst, abs(got - ref))
        v.finish(worst < 1e-8, f"max |Kalman - joint Gaussian| = {worst:.2e} (tol 1e-8)")


def test_c03_ffbs_oracle(acceptance_log):
    with Verdict(acceptance_log, 3, 30) as v:
        ssm = LinearGaussianSSM([[0.8]], [[1.0]], [[0.5]], [[1.0]], [[0.3]], [0.0], [[1.0]])
        inputs = np.array([[0.2], [0.0], [-0.1], [0.4], [0.0]])
        y = np.array([[0.5], [np.nan], [0.1], [0.9], [0.2]])
        obs = ObservationSeries(y)
        draws = ffbs_sample(kalman_filter(ssm, inputs, obs), ssm, gen(3), size=200_000)
        mean, cov = joint_smoother(*oracle_args(ssm, inputs, 5), np.nan_to_num(y), obs.missing)
        z_mean, z_cov = moment_z_scores(draws[:, :, 0], mean, cov)
        zm, zc = np.abs(z_mean).max(), np.abs(z_cov).max()
        v.finish(zm < 4 and zc < 5, f"max |z| means {zm:.2f} (tol 4), covariances {zc:.2f} (tol 5)")


def test_c04_conjugate_oracles(acceptance_log):
    with Verdict(acceptance_log, 4, 5) as v:
        p = HierPriors()
        mean, cov = conjugate_mu_params(np.empty((0, 13)), np.eye(13), p)
        prior_ok = np.allclose(mean, p.mu0, rtol=0, atol=1e-12) and np.allclose(
            cov, p.Sigma0, rtol=0, atol=1e-12)
        mu = np.linspace(-1.0, 1.0, 13)
        scale, dof = conjugate_sigma_params(mu[None, :], mu, p)
        zero_ok = np.array_equal(scale, p.Psi) and dof == p.d + 1
        # one dimension, prior N(1, 4), IW(1, 3); members 3 and 5 with variance 2
        p1 = HierPriors(mu0=[1.0], Sigma0=[[4.0]], Psi=[[1.0]], d=3.0)
        lam = np.array([[3.0], [5.0]])
        m1, c1 = conjugate_mu_params(lam, np.array([[2.0]]), p1)
        s1, d1 = conjugate_sigma_params(lam, np.array([3.0]), p1)
        err = max(abs(m1[0] - 3.4), abs(c1[0, 0] - 0.8), abs(s1[0, 0] - 5.0), abs(d1 - 5.0))
        # with no members the mean draw follows the prior
        draws = np.array([conjugate_mu_sigma(np.empty((0, 1)), np.eye(1), p1, rng)[0][0]
                          for rng in [gen(4)] for _ in range(10_000)])
        ks = stats.kstest(draws, stats.norm(1.0, 2.0).cdf).pvalue
        v.finish(prior_ok and zero_ok and err < 1e-12 and ks > 0.01,
                 f"M=0 prior {prior_ok} (KS p {ks:.2f}), zero residual {zero_ok}, "
                 f"hand case err {err:.1e}")


def test_c05_shared_nu_oracle(acceptance_log):
    with Verdict(acceptance_log, 5, 60) as v:
        delta = gen(50).standard_normal((3, 6)).cumsum(axis=1)
        sd = np.array([0.5, 1.0, 0.8])
        draws = sample_shared_nu(delta, sd, 0.7, gen(5), p0_delta=1.0, size=100_000)
        mean, cov = nu_conditional(delta, sd, 0.7, 1.0)
        z_mean, z_cov = moment_z_scores(draws, mean, cov)
        zm, zc = np.abs(z_mean).max(), np.abs(z_cov).max()
        v.finish(zm < 4 and zc < 4, f"max |z| means {zm:.2f}, covariances {zc:.2f} (tol 4)")


def ram_acceptance(dim, target, start_scale, rng, n_adapt=25_000, n_eval=20_000):
    logpdf = lambda x: -0.5 * float(x @ x)
    prop = RamProposal(start_scale * np.eye(dim), target)
    x, lt = np.zeros(dim), 0.0
    for _ in range(n_adapt):
        res = mh_step(x, lt, logpdf, prop, rng)
        ram_adapt(prop, res.z, res.alpha)
        x, lt = res.x, res.log_target
    prop.frozen = True
    acc = 0
    for _ in range(n_eval):
        res = mh_step(x, lt, logpdf, prop, rng)
        x, lt = res.x, res.log_target
        acc += res.accepted
    return acc / n_eval


def test_c06_ram_calibration(acceptance_log):
    with Verdict(acceptance_log, 6, 60) as v:
        rng = gen(6)
        a13 = ram_acceptance(13, 0.26, 0.1, rng)
        a1 = ram_acceptance(1, 0.44, 10.0, rng)
        v.finish(abs(a13 - 0.26) <= 0.05 and abs(a1 - 0.44) <= 0.05,
                 f"acceptance 13-D {a13:.3f} (target 0.26), 1-D {a1:.3f} (target 0.44)")


def abrupt_replicate(theta, seed, t_len=150):
    ssm = build_basic_system(theta)
    sim = simulate(ssm, np.full((t_len, 1), 2.0), gen(seed), obs_noise=False)
    return ScenarioData("abrupt", ObservationSeries(sim.obs),
                        ForcingSeries(np.full(t_len, 2.0)))


@pytest.mark.slow
def test_c07_mle_recovery(acceptance_log):
    with Verdict(acceptance_log, 7, 600) as v:
        theta = table2_params("HadGEM2-ES")
        truth = np.log(theta.basic_subset())
        inside = []
        for r in range(50):
            fit = fit_abrupt(abrupt_replicate(theta, 7000 + r), n_restarts=2, rng=r)
            sd = np.sqrt(np.diag(fit.log_theta_cov))
            inside.append(np.abs(np.log(fit.theta_hat.basic_subset()) - truth) <= 3 * sd)
        frac = np.mean(inside, axis=0)
        v.finish(frac.min() >= 0.95,
                 f"worst per-parameter fraction within 3 SD {frac.min():.2f} (need >= 0.95)")


def test_c08_discrepancy_ramp_bias(acceptance_log, tmp_path):
    with Verdict(acceptance_log, 8, 120) as v:
        gen_cfg = tmp_path / "gen.yaml"
        gen_cfg.write_text(yaml.safe_dump({"synthetic": {
            "n_members": 1, "tau_H": 60, "tau_F": 140, "start_year": 1901,
            "abrupt_len": 150, "mu_row": "HadGEM2-ES", "Sigma_diag": [1e-6] * 13,
            "sigma_nu": 0.0, "discrepancy_ramp": 0.02, "seed": 8}}))
        data = tmp_path / "d"
        assert main(["simulate-synthetic", "--config", str(gen_cfg), "--out", str(data)]) == 0
        body = yaml.safe_load((data / "dataset.yaml").read_text())
        body["mle_demo"] = {"n_samples": 1000, "n_restarts": 2}
        (data / "run.yaml").write_text(yaml.safe_dump(body))
        report = mle_demo(load_config(str(data / "run.yaml")), str(tmp_path / "o"), 0)[0]
        rep = report["model01"]
        zt, zn = rep["mean_z_tas"], rep["mean_z_rndt"]
        v.finish(zt > 2 and abs(zn) <= 2, f"mean z T1 {zt:+.2f} (need > +2), N {zn:+.2f} "
                 "(need within +-2)")


@pytest.mark.slow
def test_c09_perfect_model_reliability(acceptance_log, fixture_dir, tmp_path):
    with Verdict(acceptance_log, 9, 1800) as v:
        cfg = load_config(os.path.join(fixture_dir, "cv", "run.yaml"))
        report = cross_validate(cfg, str(tmp_path), threads=1)
        cov = report.coverage_overall
        bias = float(np.nanmax(np.abs(report.mean_bias)))
        ok = 0.88 <= cov <= 0.99 and bias < 0.5 and not report.failed
        v.finish(ok, f"coverage {cov:.3f} (need 0.88-0.99), max |mean z| {bias:.3f} "
                 f"(need < 0.5), failed folds {len(report.failed)}")


@pytest.mark.slow
def test_c10_prior_recovery(acceptance_log):
    with Verdict(acceptance_log, 10, 600) as v:
        t_len = 4
        f = ForcingSeries(np.linspace(0.0, 1.0, t_len), np.zeros(t_len))

        def empty(label):
            return ScenarioData(label, ObservationSeries(np.full((t_len, 2), np.nan)), f)

        members = [MemberData(f"m{i}", empty(f"m{i}")) for i in range(2)]
        data = EnsembleData(members, empty("real_world"), t_len)
        pr = HierPriors()
        cfg = McmcConfig(n_chains=4, burn_in=500, n_iter=25_000, thin=10, seed=1)
        out = run_chains(data, pr, cfg)
        mu, sig, snu = out.flat("mu"), out.flat("Sigma"), out.flat("sigma_nu")
        sd0 = np.sqrt(np.diag(pr.Sigma0))
        a = (pr.d - pr.dim + 1) / 2
        ps = [stats.kstest(mu[:, j], stats.norm(pr.mu0[j], sd0[j]).cdf).pvalue
              for j in range(13)]
        ps += [stats.kstest(sig[:, j, j], stats.invgamma(a, scale=pr.Psi[j, j] / 2).cdf).pvalue
               for j in range(13)]
        ps.append(stats.kstest(np.log(snu), stats.norm(pr.a_nu, np.sqrt(pr.b_nu)).cdf).pvalue)
        v.finish(min(ps) > 0.01 and mu.shape[0] == 10_000,
                 f"min KS p {min(ps):.3f} over {len(ps)} marginals, {mu.shape[0]} draws "
                 "(need p > 0.01)")


def tree(root):
    """Relative paths of every file below ``root``."""
    return sorted(os.path.relpath(os.path.join(d, f), root)
                  for d, _, files in os.walk(root) for f in files)


STAGES = ["fit-abrupt", "mle-demo", "fit-hier", "project", "diagnostics", "cross-validate"]


def test_c11_determinism(acceptance_log, tmp_path):
    with Verdict(acceptance_log, 11, 600) as v:
        gen_cfg = tmp_path / "gen.yaml"
        gen_cfg.write_text(yaml.safe_dump({"synthetic": {
            "n_members": 3, "tau_H": 15, "tau_F": 20, "start_year": 1901, "abrupt_len": 30,
            "seed": 11}}))
        tiny = {"n_chains": 2, "burn_in": 20, "n_iter": 40, "thin": 4, "seed": 5,
                "map_maxfev": 200}
        runs = {}
        for name, threads in (("a", 1), ("b", 1), ("c", 2)):
            out = tmp_path / name
            assert main(["simulate-synthetic", "--config", str(gen_cfg), "--out", str(out),
                         "--threads", str(threads)]) == EXIT_OK
            body = yaml.safe_load((out / "dataset.yaml").read_text())
            body.update({"mcmc": tiny, "cv": {"mcmc": tiny},
                         "mle_demo": {"n_samples": 50, "n_restarts": 1, "maxfev": 1500}})
            (out / "run.yaml").write_text(yaml.safe_dump(body))
            for stage in STAGES:
                code = main([stage, "--config", str(out / "run.yaml"), "--out", str(out),
                             "--seed", "3", "--threads", str(threads)])
                assert code in (EXIT_OK, EXIT_CONVERGENCE), (stage, code)
            runs[name] = tree(out)
        same = runs["a"] == runs["b"] == runs["c"]
        diff = [f"{other}:{f}" for other in ("b", "c") for f in runs["a"]
                if not filecmp.cmp(tmp_path / "a" / f, tmp_path / other / f, shallow=False)]
        v.finish(same and not diff, f"{len(runs['a'])} files compared across reruns and "
                 f"1 vs 2 threads, differing {diff or 'none'}")
