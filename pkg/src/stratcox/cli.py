"""Command-line interface: ``stratcox simulate | fit | mc``.

Exit codes: 0 success, 2 bad input, 3 EM did not converge (results are still
written), 4 singular information block, 5 too many failed Monte Carlo
replications.
"""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .em import EStepError, fit
from .io import (default_lambda_grid, dump_document, fit_document, read_dataset_csv,
                 write_dataset_csv)
from .model import DataValidationError, FitConfig
from .simulate import (MonteCarloError, ReplicationRejected, SimConfigError,
                       generate, load_sim_config, run_monte_carlo)
from .variance import SingularBlockError, estimate_variance

EXIT_OK, EXIT_INPUT, EXIT_NOCONV, EXIT_LINALG, EXIT_MC = 0, 2, 3, 4, 5

log = logging.getLogger("stratcox")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _fit_config(args):
    kw = {}
    if args.em_tol is not None:
        kw["em_tol"] = args.em_tol
    if args.max_iters is not None:
        kw["max_em_iters"] = args.max_iters
    return FitConfig(**kw)


def _config_dict(cfg):
    d = dataclasses.asdict(cfg)
    d.pop("init_params", None)
    return d


def _fail(code, msg):
    print(f"error: {msg}", file=sys.stderr)
    return code


def cmd_simulate(args):
    try:
        cfg = load_sim_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        data = generate(cfg)
    except FileNotFoundError:
        return _fail(EXIT_INPUT, f"config file not found: {args.config}")
    except (SimConfigError, ReplicationRejected, ValueError) as exc:
        return _fail(EXIT_INPUT, f"{args.config}: {exc}")
    write_dataset_csv(data, args.out)
    print(f"n={data.n} K={data.k_strata} event_rate={data.status.mean():.4f} "
          f"missing_rate={1 - data.r.mean():.4f} seed={cfg.seed} -> {args.out}")
    return EXIT_OK


def cmd_fit(args):
    try:
        data = read_dataset_csv(args.data, k_strata=args.k_strata, tau=args.tau,
                                jitter_ties=args.jitter_ties, seed=args.seed)
        config = _fit_config(args)
    except FileNotFoundError:
        return _fail(EXIT_INPUT, f"data file not found: {args.data}")
    except (DataValidationError, ValueError) as exc:
        return _fail(EXIT_INPUT, f"{args.data}: {exc}")
    try:
        result = fit(data, config)
    except (EStepError, ZeroDivisionError) as exc:
        return _fail(EXIT_INPUT, f"{args.data}: {exc}")
    variance = None
    code = EXIT_OK if result.converged else EXIT_NOCONV
    grid = args.lambda_grid
    if grid is not None:
        grid = [t for t in grid if 0.0 < t < data.tau]
    if args.variance:
        try:
            variance = estimate_variance(result.theta_hat, data)
        except (SingularBlockError, np.linalg.LinAlgError) as exc:
            code = EXIT_LINALG
            print(f"error: {exc}", file=sys.stderr)
    resolved = _config_dict(config)
    resolved.update(variance=bool(args.variance), jitter_ties=bool(args.jitter_ties),
                    tau=data.tau, k_strata=data.k_strata,
                    lambda_grid=grid if grid is not None else default_lambda_grid(data))
    doc = fit_document(result, data, resolved, variance,
                       lambda_grid=resolved["lambda_grid"], seed=args.seed)
    dump_document(doc, args.out)
    print(f"{'parameter':<16}{'estimate':>12}{'se':>12}")
    for row in doc["estimates"]["beta"] + doc["estimates"]["gamma"]:
        se = "" if row["se"] is None else f"{row['se']:.6f}"
        print(f"{row['name']:<16}{row['estimate']:>12.6f}{se:>12}")
    print(f"loglik={result.loglik_trace[-1]:.6f} iterations={result.em_iterations} "
          f"converged={result.converged}")
    if not result.converged:
        print("warning: EM did not converge; results flagged", file=sys.stderr)
    return code


def cmd_mc(args):
    try:
        cfg = load_sim_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        fit_config = _fit_config(args)
    except FileNotFoundError:
        return _fail(EXIT_INPUT, f"config file not found: {args.config}")
    except (SimConfigError, ValueError) as exc:
        return _fail(EXIT_INPUT, f"{args.config}: {exc}")
    if args.reps < 2:
        return _fail(EXIT_INPUT, "--reps must be >= 2")
    try:
        summary = run_monte_carlo(cfg, args.reps, fit_config, workers=args.workers)
    except MonteCarloError as exc:
        return _fail(EXIT_MC, str(exc))
    out = Path(args.out)
    summary.to_csv(out)
    fail_log = Path(args.failures) if args.failures else out.with_suffix(".failures.log")
    fail_log.write_text("".join(f"replication {i}: {msg}\n" for i, msg in summary.failures),
                        encoding="utf-8")
    meta = {"tool": "stratcox", "version": __version__, "config": cfg.to_dict(),
            "seed": cfg.seed, "reps": args.reps, "fit_config": _config_dict(fit_config),
            "lambda_times": list(summary.lambda_times), "n_failed": summary.n_failed}
    out.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2) + "\n",
                                             encoding="utf-8")
    print(summary.table())
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="stratcox", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"stratcox {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="generate a dataset from a config file")
    sp.add_argument("config")
    sp.add_argument("-o", "--out", required=True)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_simulate)

    fp = sub.add_parser("fit", help="fit the model to a dataset CSV")
    fp.add_argument("data")
    fp.add_argument("-o", "--out", required=True)
    fp.add_argument("--variance", action="store_true", help="compute standard errors")
    fp.add_argument("--lambda-grid", type=_floats,
                    help="times for baseline SEs (default: event-time deciles)")
    fp.add_argument("--em-tol", type=float)
    fp.add_argument("--max-iters", type=int)
    fp.add_argument("--jitter-ties", action="store_true")
    fp.add_argument("--seed", type=int, default=0, help="seed for tie jittering")
    fp.add_argument("--k-strata", type=int)
    fp.add_argument("--tau", type=float)
    fp.set_defaults(func=cmd_fit)

    mp = sub.add_parser("mc", help="run a Monte Carlo study")
    mp.add_argument("config")
    mp.add_argument("--reps", type=int, required=True)
    mp.add_argument("-o", "--out", required=True)
    mp.add_argument("--workers", type=int, default=1)
    mp.add_argument("--seed", type=int)
    mp.add_argument("--failures", help="failed-replication log path")
    mp.add_argument("--em-tol", type=float)
    mp.add_argument("--max-iters", type=int)
    mp.set_defaults(func=cmd_mc)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
