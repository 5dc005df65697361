"""``stochebm`` command-line entry point.

Exit status: 0 success, 2 validation failure (bad config, bad input files,
usage errors), 3 convergence failure (non-finite likelihoods everywhere,
failed chains, hyperparameter R-hat above 1.1).
"""
import argparse
import json
import logging
import os
import sys

from ..exceptions import ConvergenceError, NumericalError, ValidationError
from . import pipeline
from .config import ENV_OUT, ENV_THREADS, load_config, resolve_output_dir, resolve_threads

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3

COMMANDS = ("simulate-synthetic", "fit-abrupt", "mle-demo", "fit-hier", "project",
            "cross-validate", "diagnostics")

logger = logging.getLogger("stochebm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def build_parser():
    p = _Parser(prog="stochebm", description="Stochastic energy balance model toolkit.",
                epilog=f"Environment: ${ENV_OUT} sets the output directory and "
                       f"${ENV_THREADS} the worker count when the flags are absent.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", metavar="PATH", help="YAML run configuration")
        s.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
        s.add_argument("--out", metavar="DIR", default=None, help="output directory")
        s.add_argument("--threads", type=int, default=None, help="parallel workers")
        s.add_argument("--dry-run", action="store_true",
                       help="validate inputs and print the plan without computing")
        s.add_argument("-v", "--verbose", action="store_true")
        if name in ("project", "diagnostics"):
            s.add_argument("--posterior", metavar="PATH", default=None,
                           help="posterior CSV (default: OUT/posterior.csv)")
        if name == "fit-hier":
            s.add_argument("--resume", action="store_true",
                           help="continue from checkpoints in OUT/checkpoint")
    return p


def _plan(args, cfg, out, threads):
    plan = {"command": args.command, "output_dir": out, "threads": threads,
            "seed": args.seed, "members": [m.label for m in cfg.members],
            "inputs": cfg.referenced_files()}
    if args.command == "fit-hier":
        mc = cfg.mcmc.build(args.seed)
        plan["mcmc"] = {"n_chains": mc.n_chains, "burn_in": mc.burn_in, "n_iter": mc.n_iter,
                        "thin": mc.thin, "draws_per_chain": mc.n_keep, "seed": mc.seed}
        plan["priors"] = cfg.priors.build().to_dict()
    elif args.command == "cross-validate":
        mc = cfg.cv.mcmc.build(args.seed)
        plan["folds"] = len(cfg.members)
        plan["mcmc"] = {"n_chains": mc.n_chains, "burn_in": mc.burn_in, "n_iter": mc.n_iter,
                        "thin": mc.thin, "draws_per_chain": mc.n_keep, "seed": mc.seed}
    elif args.command == "simulate-synthetic":
        plan["synthetic"] = cfg.synthetic.model_dump()
    return plan


def _validate_inputs(args, cfg):
    if args.command == "simulate-synthetic":
        cfg.synthetic.log_mu()
        return
    if args.command in ("fit-abrupt", "mle-demo", "cross-validate") and not cfg.members:
        raise ValidationError("the configuration lists no ensemble members")
    if args.command != "diagnostics":
        pipeline.load_data(cfg)


def run(args):
    cfg = load_config(args.config)
    out = resolve_output_dir(cfg, args.out)
    threads = resolve_threads(cfg, args.threads)
    _validate_inputs(args, cfg)
    if args.dry_run:
        print(json.dumps(pipeline.io._jsonable(_plan(args, cfg, out, threads)), indent=2,
                         sort_keys=True))
        return EXIT_OK
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"{out}: cannot create output directory: {exc}") from None
    if not os.access(out, os.W_OK):
        raise ValidationError(f"{out}: output directory is not writable")
    seed = args.seed
    cmd = args.command
    if cmd == "simulate-synthetic":
        pipeline.simulate_synthetic(cfg, out, seed)
    elif cmd == "fit-abrupt":
        fits = pipeline.fit_abrupt_all(cfg, out, 0 if seed is None else seed)
        if not all(f.converged for f in fits.values()):
            bad = sorted(k for k, f in fits.items() if not f.converged)
            logger.error("optimizer did not converge for: %s", ", ".join(bad))
            return EXIT_CONVERGENCE
    elif cmd == "mle-demo":
        pipeline.mle_demo(cfg, out, 0 if seed is None else seed)
    elif cmd == "fit-hier":
        output, report = pipeline.fit_hier(cfg, out, seed, threads, resume=args.resume)
        if output.failures:
            logger.error("chains failed: %s", output.failures)
            return EXIT_CONVERGENCE
        if report["hyperparameters_not_converged"]:
            logger.error("R-hat above %.2f for: %s", pipeline.RHAT_LIMIT,
                         ", ".join(report["hyperparameters_not_converged"]))
            return EXIT_CONVERGENCE
    elif cmd == "project":
        pipeline.project(cfg, out, args.posterior, 0 if seed is None else seed)
    elif cmd == "cross-validate":
        report = pipeline.cross_validate(cfg, out, seed, threads)
        print(f"coverage |z|<=2: {report.coverage_overall:.4f}")
        if report.failed:
            logger.error("folds failed: %s", ", ".join(sorted(report.failed)))
            return EXIT_CONVERGENCE
    elif cmd == "diagnostics":
        report = pipeline.diagnostics(cfg, out, args.posterior)
        if report["hyperparameters_not_converged"]:
            return EXIT_CONVERGENCE
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConvergenceError, NumericalError) as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE


if __name__ == "__main__":
    sys.exit(main())
