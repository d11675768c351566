"""Command line entry point ``spde-milstein``."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import (ExperimentPlan, LockedError, ResourceError, run_experiment, solve)
from .problem import ConfigError, load_config
from .scheme import NumericalBlowUp

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_BLOWUP, EXIT_RESOURCE = 0, 1, 2, 3, 4


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file with 'problem' and 'experiment' sections")
    p.add_argument("--paths", type=int, dest="n_paths", help="number of Monte Carlo paths")
    p.add_argument("--seed", type=int, help="RNG seed")
    p.add_argument("--out", help="output directory (CSV and JSON)")
    p.add_argument("--p", type=float, dest="p", help="moment of the L_p norms")
    p.add_argument("--variant", choices=["milstein", "em", "truncated"])
    p.add_argument("--J", type=int, dest="J", help="truncation level of the truncated variant")
    p.add_argument("--workers", type=int, help="worker processes for path batches")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--weighted", action="store_true", default=None,
                   help="weight the rate fit by Monte Carlo standard errors")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spde-milstein",
        description="Milstein-Galerkin schemes for semilinear stochastic heat equations.")
    sub = parser.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", help="single discretisation, trajectory norm summary")
    _common(s)
    s.add_argument("--k", type=float, help="time step")
    s.add_argument("--n-cells", type=int, dest="n_cells", help="number of mesh cells")
    c = sub.add_parser("convergence", help="coupled convergence study")
    c.add_argument("study", choices=["temporal", "spatial", "truncation"])
    _common(c)
    r = sub.add_parser("residual", help="two-sided error/residual study")
    _common(r)
    g = sub.add_parser("regularity", help="moments and Holder exponents of the reference")
    _common(g)
    t = sub.add_parser("selftest", help="run the fast property checks")
    t.add_argument("-v", "--verbose", action="store_true")
    return parser


def _plan(args, study: str) -> ExperimentPlan:
    data = load_config(args.config) if args.config else {}
    exp = dict(data.get("experiment") or {})
    exp.pop("study", None)
    if data.get("problem"):
        exp["problem"] = dict(data["problem"])
    flags = {k: getattr(args, k, None) for k in
             ("n_paths", "seed", "out", "p", "variant", "J", "workers", "batch_size",
              "weighted", "k", "n_cells")}
    exp.update({k: v for k, v in flags.items() if v is not None})
    if study == "truncation" and args.J is not None:
        exp.setdefault("ladder", [args.J])
    return ExperimentPlan.for_study(study, **exp)


def _print_report(report) -> None:
    cols = ("param", "error", "stderr", "residual", "ratio")
    print("  ".join(f"{c:>12}" for c in cols))
    for i, param in enumerate(report.params):
        res = report.residuals[i] if report.residuals else None
        ratio = report.ratios[i] if report.ratios else None
        vals = [param, report.errors[i], report.stderrs[i], res, ratio]
        print("  ".join(f"{'':>12}" if v is None else f"{v:12.5g}" for v in vals))
    print(f"slope {report.slope:.4f}  R^2 {report.r2:.4f}"
          + (f"  dropped {report.dropped}" if report.dropped else ""))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            from .checks import run_checks
            return EXIT_OK if run_checks() else EXIT_FAIL
        if args.command == "solve":
            plan = _plan(args, "temporal")
            summary = solve(plan)
            print(f"sup_n ||X(t_n)||_L{plan.p:g} = {summary.norms.max():.6g} "
                  f"({plan.n_paths} paths, variant {plan.variant})")
            return EXIT_OK
        if args.command == "convergence":
            plan = _plan(args, args.study)
        elif args.command == "residual":
            plan = _plan(args, "two-sided")
        else:
            plan = _plan(args, "regularity")
        report = run_experiment(plan)
        if args.command == "regularity":
            for s in report.s_values:
                print(f"s={s:g}: sup_t E||X||^2p = {report.moments[s]:.6g}, "
                      f"Holder exponent {report.exponents[s]:.3f}")
        else:
            _print_report(report)
        return EXIT_OK
    except ConfigError as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalBlowUp as exc:
        print(f"numerical blow-up: {exc}", file=sys.stderr)
        return EXIT_BLOWUP
    except (ResourceError, LockedError, MemoryError) as exc:
        print(f"resource error: {exc}", file=sys.stderr)
        return EXIT_RESOURCE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
