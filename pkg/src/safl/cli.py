"""Command-line entry point: ``safl <subcommand> ...``.

Exit codes: 0 success, 1 report checks failed, 2 config error,
3 data error, 4 divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, DataError, DivergenceError

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="experiment config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help="replace the configured seed list with this seed")
    p.add_argument("--output", metavar="DIR", help="output directory")
    p.add_argument("--workers", type=int, default=1, help="parallel worker processes (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="safl", description="Server-assisted federated learning simulator.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("run", help="run one configuration (sweep axes ignored)",
                       description="Run a single configuration; sweep axes are ignored.")
    _add_run_args(p)
    p = sub.add_parser("sweep", help="run every cell of a config's sweep grid",
                       description="Run every cell of the sweep grid and write CSV/JSON outputs.")
    _add_run_args(p)

    p = sub.add_parser("impossibility", help="Monte-Carlo failure rate of the adversarial selector",
                       description="Estimate how often the adversarially selected sample yields high risk.")
    p.add_argument("--omega", type=float, default=0.5, help="capacity m/M in (0, 1) (default 0.5)")
    p.add_argument("--M", type=int, default=10, help="number of clients (default 10)")
    p.add_argument("--n", type=int, default=20, help="samples per client (default 20)")
    p.add_argument("--trials", type=int, default=10_000, help="Monte-Carlo trials (default 10000)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    p = sub.add_parser("pac", help="excess-error rate on the threshold class",
                       description="Excess-error rate of mixture ERM on the threshold class.")
    p.add_argument("--n-grid", type=int, nargs="+", default=[100, 1000, 10_000, 100_000], metavar="N",
                   help="total sample sizes (default 100 1000 10000 100000)")
    p.add_argument("--server-fraction", type=float, default=0.1,
                   help="share of samples drawn from the target distribution (default 0.1)")
    p.add_argument("--trials", type=int, default=200, help="trials per grid point (default 200)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")

    p = sub.add_parser("report", help="recompute summaries and checks from output directories",
                       description="Recompute summaries from CSV files and print a pass/fail table.")
    p.add_argument("dirs", nargs="+", metavar="DIR", help="output directories written by run or sweep")
    return parser


def _cmd_run(args, sweep: bool) -> int:
    from .harness.config import load_config
    from .harness.runner import run_experiment

    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"sweep.seeds={args.seed}")
    cfg = load_config(args.config, overrides, output=args.output)
    if not sweep:
        for axis in ("R", "q", "s", "p", "n_T", "mk"):
            setattr(cfg.sweep, axis, [])
        cfg.sweep.seeds = cfg.sweep.seeds[:1]
    if args.workers < 1:
        raise ConfigError("--workers must be at least 1")
    out = run_experiment(cfg, workers=args.workers)
    print(f"wrote {out} (config hash {cfg.config_hash()})")
    return EXIT_OK


def _cmd_impossibility(args) -> int:
    from .learnability import ImpossibilityInstance, impossibility_failure_rate, rare_count_tail

    try:
        inst = ImpossibilityInstance(args.M, args.n, args.omega, args.trials)
        rate = impossibility_failure_rate(inst, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    tail = rare_count_tail(inst, args.seed)
    print(f"omega={args.omega:g} M={args.M} n={args.n} trials={args.trials} seed={args.seed}")
    print(f"risk threshold (1-omega)/8 = {inst.risk_threshold:.6g}")
    print(f"failure rate {rate.fraction:.4f}  95% Wilson [{rate.low:.4f}, {rate.high:.4f}]")
    print(f"P[#rare >= (1-omega)Mn] {tail.fraction:.4f}  95% Wilson [{tail.low:.4f}, {tail.high:.4f}]")
    return EXIT_OK


def _cmd_pac(args) -> int:
    from .learnability import ThresholdInstance, pac_rate_experiment

    f = args.server_fraction
    try:
        if not 0 < f <= 1:
            raise ValueError("--server-fraction must lie in (0, 1]")
        inst = ThresholdInstance(lambda1=1.0 - f, lambda2=f)
        res = pac_rate_experiment(inst, args.n_grid, args.trials, args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    print(f"{'n':>10}  mean excess error")
    for n, e in zip(res.n_grid, res.mean_excess):
        print(f"{n:>10}  {e:.6g}")
    if res.fit is None:
        print("slope: not enough usable grid points")
    else:
        print(f"log-log slope {res.fit.slope:.4f} (r2 {res.fit.r2:.4f})")
    return EXIT_OK


def _cmd_report(args) -> int:
    from .harness.report import format_reports, report_dir

    reports = [report_dir(d) for d in args.dirs]
    sys.stdout.write(format_reports(reports))
    return EXIT_OK if all(r.passed for r in reports) else EXIT_CHECKS


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command in ("run", "sweep"):
            return _cmd_run(args, args.command == "sweep")
        if args.command == "impossibility":
            return _cmd_impossibility(args)
        if args.command == "pac":
            return _cmd_pac(args)
        return _cmd_report(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
