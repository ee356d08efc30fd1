"""``entrocal`` command-line interface.

Subcommands: ``calibrate``, ``twostep``, ``simulate`` and ``estimate-totals``.
Exit codes are 0 on success, 1 for usage or configuration errors and 2 for
numerical failures (diagnostics go to stderr as JSON and into the report).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings

import numpy as np

from entrocal import __version__
from entrocal.calibrate import gec_estimate, select_trim_bound, trim_cv_errors, trimmed_calibrate
from entrocal.dual_solver import CalibrationProblem, SolverControls
from entrocal.entropy import EntropyFamily, parse_entropy, parse_link
from entrocal.errors import (
    AllInfeasible,
    ConfigError,
    DebiasTotalUnavailable,
    DomainError,
    EntrocalError,
    SingularGram,
    SolverError,
)
from entrocal.fileio import (
    POPULATION_SIZE_KEY,
    dumps,
    estimate_totals,
    numeric_columns,
    read_sample,
    read_table,
    read_totals,
    warn_small_population,
    write_json,
    write_totals,
    write_weights,
)
from entrocal.simharness import metrics_csv, run_monte_carlo
from entrocal.twostep import ExactDebias, ReferenceDebias, TwoStepSpec, two_step_estimate

__all__ = ["main", "build_parser"]

_NUMERICAL = (SolverError, DomainError, DebiasTotalUnavailable, SingularGram, AllInfeasible)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def _names(text: str) -> list[str]:
    out = [t.strip() for t in text.split(",") if t.strip()]
    if len(set(out)) != len(out):
        raise ConfigError(f"duplicate names in {text!r}")
    return out


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in _names(text)]
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _controls(args) -> SolverControls:
    return SolverControls(max_iter=args.max_iter, grad_tol=args.tol)


def _add_solver(p):
    p.add_argument("--max-iter", type=int, default=100, help="Newton iteration cap")
    p.add_argument("--tol", type=float, default=1e-8, help="relative residual tolerance")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="entrocal", description="Generalized entropy calibration weighting.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="one-step calibration of a sample to totals")
    c.add_argument("--data", required=True)
    c.add_argument("--totals", required=True)
    c.add_argument("--y", default="y")
    c.add_argument("--id", default="id", help="identifier column (default: row numbers)")
    c.add_argument("--covariates", required=True, help="comma-separated column names")
    c.add_argument("--entropy", default="sl", help="sl|kl|skl|el|hd|renyi:A|huber:M")
    g = c.add_mutually_exclusive_group()
    g.add_argument("--trim", type=float, metavar="M", help="cap weights at M")
    g.add_argument("--trim-cv", metavar="M1,M2,...", help="choose the cap by cross-validation")
    c.add_argument("--folds", type=int, default=5)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out-weights", required=True)
    c.add_argument("--out-report", required=True)
    _add_solver(c)

    t = sub.add_parser("twostep", help="two-step debiased calibration")
    t.add_argument("--data", required=True)
    t.add_argument("--totals", required=True)
    t.add_argument("--y", default="y")
    t.add_argument("--id", default="id")
    t.add_argument("--ps-covariates", required=True)
    t.add_argument("--or-covariates", required=True)
    t.add_argument("--link", default="logit")
    t.add_argument("--entropy2", default="skl")
    t.add_argument("--debias-mode", choices=("exact", "reference"))
    t.add_argument("--population", help="unit-level population CSV (exact mode)")
    t.add_argument("--reference", help="design-weighted reference CSV (reference mode)")
    t.add_argument("--weight-column", default="weight")
    t.add_argument("--out-weights", required=True)
    t.add_argument("--out-report", required=True)
    _add_solver(t)

    s = sub.add_parser("simulate", help="Monte Carlo evaluation on a scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--reps", type=int, default=500)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--threads", type=int, help="worker threads (default: ENTROCAL_THREADS or 1)")

    e = sub.add_parser("estimate-totals", help="totals from a design-weighted reference sample")
    e.add_argument("--reference", required=True)
    e.add_argument("--weight-column", default="weight")
    e.add_argument("--covariates", required=True)
    e.add_argument("--out", required=True)
    return parser


def _design(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])


def _residual(names, design, weights, totals) -> dict:
    r = design.T @ weights - totals
    return dict(zip(names, (float(v) for v in r)))


def cmd_calibrate(args) -> int:
    covs = _names(args.covariates)
    ids, X, y = read_sample(args.data, args.y, covs, args.id)
    tot, estimated = read_totals(args.totals, covs)
    names = [POPULATION_SIZE_KEY] + covs
    T = np.array([tot[k] for k in names])
    warn_small_population(T[0], y.size)
    D = _design(X)
    extra = {}
    if args.trim is not None or args.trim_cv is not None:
        if args.entropy.strip().lower() != "sl":
            raise ConfigError("--trim/--trim-cv apply to the squared-loss entropy only")
        if args.trim is not None:
            M = args.trim
        else:
            Ms = _floats(args.trim_cv)
            errs = trim_cv_errors(D, T, y, Ms, args.folds, args.seed, _controls(args))
            M = select_trim_bound(D, T, y, Ms, args.folds, args.seed, _controls(args))
            extra["trim_cv"] = {"folds": args.folds, "seed": args.seed,
                                "errors": [[m, e] for m, e in errs.items()]}
        extra["trim_bound"] = M
        entropy = EntropyFamily.huber(M)
        est = trimmed_calibrate(CalibrationProblem(D, T, entropy, _controls(args)), y)
    else:
        entropy = parse_entropy(args.entropy)
        est = gec_estimate(CalibrationProblem(D, T, entropy, _controls(args)), y)
    report = est.report()
    report.pop("variance")
    report["covariates"] = covs
    report["totals_estimated"] = estimated
    report["solver"]["residual"] = _residual(names, D, est.weights, T)
    report.update(extra)
    write_weights(args.out_weights, ids, est.weights)
    write_json(args.out_report, report)
    return 0


def cmd_twostep(args) -> int:
    ps = _names(args.ps_covariates)
    orc = _names(args.or_covariates)
    cols = list(dict.fromkeys(ps + orc))
    ids, X, y = read_sample(args.data, args.y, cols, args.id)
    tot, estimated = read_totals(args.totals, cols)
    N = tot[POPULATION_SIZE_KEY]
    warn_small_population(N, y.size)
    D = _design(X)
    ps_idx = [0] + [1 + cols.index(c) for c in ps]
    or_idx = [0] + [1 + cols.index(c) for c in orc]
    T1 = np.array([N] + [tot[c] for c in ps])
    T2 = np.array([N] + [tot[c] for c in orc])

    mode = args.debias_mode or ("exact" if args.population else "reference" if args.reference else None)
    if mode == "exact":
        if not args.population:
            raise DebiasTotalUnavailable("exact debias mode needs --population")
        table = read_table(args.population)
        debias = ExactDebias(_design(numeric_columns(table, ps, args.population)))
    elif mode == "reference":
        if not args.reference:
            raise DebiasTotalUnavailable("reference debias mode needs --reference")
        table = read_table(args.reference)
        d = numeric_columns(table, [args.weight_column], args.reference)[:, 0]
        debias = ReferenceDebias(_design(numeric_columns(table, ps, args.reference)), d)
    else:
        raise DebiasTotalUnavailable(
            "the debiasing total needs --population (exact) or --reference (reference)"
        )
    spec = TwoStepSpec(
        ps_covariates=ps_idx,
        or_covariates=or_idx,
        totals1=T1,
        totals2=T2,
        debias_total=debias,
        link=parse_link(args.link),
        entropy2=parse_entropy(args.entropy2),
    )
    res = two_step_estimate(D, y, spec, _controls(args))
    report = res.report()
    report.pop("variance")
    report["ps_covariates"] = ps
    report["or_covariates"] = orc
    report["totals_estimated"] = estimated
    kept = [POPULATION_SIZE_KEY] + orc + ["_debias"]
    Z = res.z
    targets = np.append(T2, res.debias_total)
    report["solver"]["residual"] = _residual(kept, Z, res.step2_weights, targets)
    write_weights(args.out_weights, ids, res.step2_weights)
    write_json(args.out_report, report)
    return 0


def cmd_simulate(args) -> int:
    try:
        with open(args.config, encoding="utf-8") as fh:
            scenario = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {args.config}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.config}: invalid JSON ({exc.msg}, line {exc.lineno})") from exc
    results = run_monte_carlo(scenario, reps=args.reps, seed=args.seed, threads=args.threads)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv(results))
    return 0


def cmd_estimate_totals(args) -> int:
    totals = estimate_totals(args.reference, args.weight_column, _names(args.covariates))
    write_totals(args.out, totals, estimated=True)
    return 0


_COMMANDS = {
    "calibrate": cmd_calibrate,
    "twostep": cmd_twostep,
    "simulate": cmd_simulate,
    "estimate-totals": cmd_estimate_totals,
}


def _fail(args, exc) -> int:
    payload = {
        "status": "failed",
        "error": type(exc).__name__,
        "message": str(exc),
        "diagnostics": getattr(exc, "diagnostics", None) or {},
    }
    print(dumps(payload), file=sys.stderr)
    out = getattr(args, "out_report", None)
    if out:
        try:
            write_json(out, payload)
        except OSError:
            pass
    return 2


def _format_warning(message, category, filename, lineno, line=None):
    return f"entrocal: warning ({category.__name__}): {message}\n"


def main(argv=None) -> int:
    previous = warnings.formatwarning
    warnings.formatwarning = _format_warning
    try:
        return _main(argv)
    finally:
        warnings.formatwarning = previous


def _main(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    if getattr(args, "threads", None) is None and "ENTROCAL_THREADS" in os.environ:
        args.threads = os.environ["ENTROCAL_THREADS"]
    try:
        return _COMMANDS[args.command](args)
    except _NUMERICAL as exc:
        return _fail(args, exc)
    except (EntrocalError, ValueError) as exc:
        print(f"entrocal {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"entrocal {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
