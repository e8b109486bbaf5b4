"""Batch command-line front end.

Subcommands::

    balcause fit-categorical --input d.csv --k 3 --out run1
    balcause fit-continuous  --input d.csv --basis "x,a,a2,a3" --out run2
    balcause simulate --design cat41 --n 2000 --reps 500 --out t3

Exit codes: 0 success, 1 usage error, 2 data or I/O error, 3 estimator
non-convergence (results are still written, flagged).  Errors are printed to
stderr as one JSON object per line.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from .basis import covariate_basis, parse_basis
from .categorical import Z95, contrasts, default_beta_init, fit_categorical
from .continuous import ESTIMATORS, VARIANCE_FORMS, BandwidthPlan, KernelSpec, dose_response_curve
from .data import DoseTransform, Schema, TreatmentSpace, load_csv
from .errors import BalcauseError, DataError, EmptyWindow, InvalidDataset, NonConvergence
from .propensity import BetaDensity, ExtendedLogit, MultinomialLogit, SameBasisLogLinear
from .simulation import DESIGNS, METHODS, Scenario, SimulationFailed, run_replicates

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NONCONV = 0, 1, 2, 3

# flags that never change numeric output and so stay out of the config hash
_UNHASHED = ("out", "workers", "command", "func")

BASIS_HELP = """\
basis grammar (comma-separated terms):
  linear        every covariate column (same as x)
  x             every covariate column, in order
  x1, x2, ...   one column, 1-based, counting the intercept when present
  a, a2, a3     treatment value and its powers (a^3 and a**3 also work)
  x2*x3         products, sums, differences, quotients and powers
  exp(x2)       exp, log, sqrt, sin, cos, abs
  a*x           treatment times every covariate column
example: "x,a,a2,a3"
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    # skip the default for flags, unset options and help that already states it
    def _get_help_string(self, action):
        text = action.help or ""
        if action.default is None or action.nargs == 0 or "default" in text:
            return text
        return super()._get_help_string(action)


def _csv_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _float_pair(text):
    parts = _csv_list(text)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return float(parts[0]), float(parts[1])


def _h_rule(text):
    if text in ("loocv", "oscv"):
        return text
    try:
        h = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"h must be loocv, oscv or a positive number, got {text!r}")
    if not h > 0:
        raise argparse.ArgumentTypeError("fixed h must be positive")
    return h


def _add_data_flags(p):
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--treatment", default="a", help="treatment column")
    p.add_argument("--outcome", default="y", help="outcome column")
    p.add_argument("--covariates", type=_csv_list, default=None,
                   help="comma-separated covariate columns (default: all other columns)")
    p.add_argument("--no-intercept", dest="intercept", action="store_false",
                   help="do not prepend a column of ones to the covariates")
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--workers", type=int, default=0,
                   help="worker processes, 0 for all available cores (does not affect results)")


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="balcause", description=__doc__, formatter_class=_Formatter,
                  allow_abbrev=False)
    sub = top.add_subparsers(dest="command", required=True, parser_class=_Parser)

    fc = sub.add_parser("fit-categorical", help="balancing IPW for a categorical treatment",
                        formatter_class=_Formatter, epilog=BASIS_HELP, allow_abbrev=False)
    _add_data_flags(fc)
    fc.add_argument("--k", type=int, required=True, help="highest treatment level (levels 0..K)")
    fc.add_argument("--family", choices=("mnl", "extended", "samebasis"), default="mnl",
                    help="propensity family: multinomial logit, logit with a free "
                         "reference block, or same-basis linear")
    fc.add_argument("--basis", default="linear", help="outcome basis B(k, x); see grammar below")
    fc.add_argument("--ref", type=int, default=0, help="reference level for contrasts")
    fc.add_argument("--z", type=float, default=Z95, help="normal critical value for intervals")
    fc.add_argument("--maxiter", type=int, default=1000, help="optimizer iteration cap")
    fc.set_defaults(func=_cmd_fit_categorical)

    fo = sub.add_parser("fit-continuous", help="balancing IPW dose-response curve",
                        formatter_class=_Formatter, epilog=BASIS_HELP, allow_abbrev=False)
    _add_data_flags(fo)
    fo.add_argument("--family", choices=("beta",), default="beta",
                    help="propensity family: beta density of dose / beta-scale")
    fo.add_argument("--beta-scale", type=float, default=1.0,
                    help="doses (after any transform) must lie in (0, beta-scale)")
    fo.add_argument("--dose-shift", type=float, default=0.0,
                    help="affine transform a = (raw - shift) / scale applied at load")
    fo.add_argument("--dose-scale", type=float, default=1.0,
                    help="affine transform a = (raw - shift) / scale applied at load")
    fo.add_argument("--basis", default="x,a,a2,a3", help="outcome basis B(a, x); see grammar")
    fo.add_argument("--h", type=_h_rule, default="loocv",
                    help="outcome bandwidth: loocv, oscv or a fixed positive number")
    fo.add_argument("--h-grid", type=_csv_list, default=None,
                    help="comma-separated CV bandwidth grid (default: 20 log-spaced "
                         "points on [0.5, 3] x 1.06 sd(A) n^(-1/5))")
    fo.add_argument("--l", type=float, default=None, help="fixed balancing bandwidth")
    fo.add_argument("--l-const", type=float, default=3.0,
                    help="balancing bandwidth l = l-const * n^(-1/3) when --l is absent")
    fo.add_argument("--kernel", choices=("epanechnikov", "triweight", "uniform"),
                    default="epanechnikov", help="kernel")
    fo.add_argument("--estimator", choices=ESTIMATORS, default="local_constant",
                    help="curve estimator")
    fo.add_argument("--variance", choices=VARIANCE_FORMS, default="ratio",
                    help="pointwise variance estimator")
    fo.add_argument("--grid", type=int, default=101, help="number of curve grid points")
    fo.add_argument("--grid-range", type=_float_pair, default=None,
                    help="LO,HI on the original dose scale (default: 10%%-trimmed doses)")
    fo.add_argument("--allow-boundary", action="store_true",
                    help="allow grid points within h of the observed dose range")
    fo.add_argument("--z", type=float, default=Z95, help="normal critical value for bands")
    fo.set_defaults(func=_cmd_fit_continuous)

    si = sub.add_parser("simulate", help="run a simulation scenario",
                        formatter_class=_Formatter, allow_abbrev=False)
    si.add_argument("--design", choices=DESIGNS, required=True, help="data-generating design")
    si.add_argument("--n", type=int, required=True, help="sample size")
    si.add_argument("--reps", type=int, required=True, help="number of replicates")
    si.add_argument("--pi", choices=("correct", "misspecified"), default="correct",
                    help="propensity working model")
    si.add_argument("--m", choices=("correct", "misspecified"), default="correct",
                    help="outcome basis")
    si.add_argument("--seed", type=int, default=0, help="64-bit seed; replicate r uses seed^r")
    si.add_argument("--methods", type=_csv_list, default="balancing",
                    help=f"comma-separated subset of {','.join(METHODS)}")
    si.add_argument("--estimator", choices=ESTIMATORS, default="local_constant",
                    help="curve estimator (continuous designs)")
    si.add_argument("--h", type=_h_rule, default="loocv",
                    help="outcome bandwidth rule (continuous designs)")
    si.add_argument("--l-const", type=float, default=3.0,
                    help="balancing bandwidth constant (continuous designs)")
    si.add_argument("--kernel", choices=("epanechnikov", "triweight", "uniform"),
                    default="epanechnikov", help="kernel (continuous designs)")
    si.add_argument("--grid-size", type=int, default=51,
                    help="evaluation grid points for integrated metrics")
    si.add_argument("--out", required=True, help="output path prefix")
    si.add_argument("--workers", type=int, default=0,
                    help="worker processes, 0 for all available cores (does not affect results)")
    si.set_defaults(func=_cmd_simulate)
    return top


# --- helpers -----------------------------------------------------------------


def config_of(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}


def config_hash(args) -> str:
    blob = json.dumps(config_of(args), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        return _clean(obj.item())
    return obj


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def _write_csv(path, header, rows, digest) -> None:
    lines = [",".join(header)]
    lines += [",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)
                       for v in row) for row in rows]
    lines.append(f"# config-hash: {digest}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def emit_outputs(results: dict, prefix) -> list:
    """Write ``{suffix: payload}`` next to ``prefix``.

    A payload is either ``("csv", header, rows, digest)`` or ``("json", obj)``.
    Returns the written paths.
    """
    written = []
    for suffix, payload in results.items():
        path = Path(f"{prefix}.{suffix}")
        if payload[0] == "csv":
            _write_csv(path, *payload[1:])
        else:
            _write_json(path, payload[1])
        written.append(path)
    return written


def _workers(args) -> int:
    if args.workers < 0:
        raise UsageError("--workers must be 0 (all cores) or positive")
    return args.workers or os.cpu_count() or 1


def _schema(args, space, transform=None) -> Schema:
    covs = args.covariates
    if covs is None:
        with Path(args.input).open(newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in fh.readline().strip().split(",") if h.strip()]
        covs = [h for h in header if h not in (args.treatment, args.outcome)]
    return Schema(args.treatment, args.outcome, covs, args.intercept, transform)


def _basis(text, d):
    return covariate_basis(d) if text.strip() == "linear" else parse_basis(text, d)


# --- subcommands -----------------------------------------------------------------


def _cmd_fit_categorical(args) -> int:
    _workers(args)
    space = TreatmentSpace.categorical(args.k)
    ds = load_csv(args.input, _schema(args, space), space)
    basis = _basis(args.basis, ds.d)
    if args.family == "mnl":
        family = MultinomialLogit(args.k, ds.d)
    elif args.family == "extended":
        family = ExtendedLogit(args.k, ds.d)
    else:
        family = SameBasisLogLinear(args.k, basis)
    if not 0 <= args.ref <= args.k:
        raise UsageError(f"--ref must be in 0..{args.k}")
    fit = fit_categorical(ds, family, basis, default_beta_init(ds, family), maxiter=args.maxiter)
    cs = contrasts(fit, args.ref, args.z)
    digest = config_hash(args)
    payload = fit.to_dict()
    payload["contrasts"] = [c.__dict__ for c in cs]
    payload["metadata"] = {"config": config_of(args), "config_hash": digest,
                           "family": args.family, "basis": basis.description,
                           "covariate_names": list(ds.covariate_names), "n": ds.n}
    rows = [(c.level, c.estimate, c.sd, c.ci_lo, c.ci_hi) for c in cs]
    emit_outputs({
        "fit.json": ("json", payload),
        "contrasts.csv": ("csv", ["k", "estimate", "sd", "ci_lo", "ci_hi"], rows, digest),
    }, args.out)
    return EXIT_OK if fit.converged else EXIT_NONCONV


def _cmd_fit_continuous(args) -> int:
    _workers(args)
    if args.dose_scale <= 0:
        raise UsageError("--dose-scale must be positive")
    transform = None
    if args.dose_shift != 0.0 or args.dose_scale != 1.0:
        transform = DoseTransform(args.dose_shift, args.dose_scale)
    space = TreatmentSpace.continuous(0.0, args.beta_scale)
    ds = load_csv(args.input, _schema(args, space, transform), space)
    basis = parse_basis(args.basis.replace("linear", "x"), ds.d)
    family = BetaDensity(ds.d, args.beta_scale)
    h_grid = None if args.h_grid is None else tuple(float(v) for v in args.h_grid)
    plan = BandwidthPlan(h=args.h, l=args.l, c_l=args.l_const, h_grid=h_grid)
    grid = args.grid
    if args.grid_range is not None:
        lo, hi = args.grid_range
        if transform is not None:
            lo, hi = transform.forward(lo), transform.forward(hi)
        grid = np.linspace(float(lo), float(hi), args.grid)
    curve = dose_response_curve(ds, family, basis, plan, grid, args.estimator, args.variance,
                                kernel=KernelSpec(args.kernel), allow_boundary=args.allow_boundary,
                                z=args.z)
    digest = config_hash(args)
    meta = curve.metadata()
    meta.update({"config": config_of(args), "config_hash": digest, "basis": basis.description,
                 "beta_layout": family.layout, "n": ds.n,
                 "grid": np.asarray(curve.grid).tolist()})
    emit_outputs({
        "curve.csv": ("csv", ["a", "theta", "variance", "lo", "hi"], curve.rows(), digest),
        "curve.json": ("json", meta),
    }, args.out)
    return EXIT_OK if curve.converged else EXIT_NONCONV


def _cmd_simulate(args) -> int:
    workers = _workers(args)
    try:
        sc = Scenario(args.design, args.n, args.reps, args.pi == "correct", args.m == "correct",
                      args.seed, tuple(args.methods), args.estimator, args.h, args.l_const,
                      args.kernel, args.grid_size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    code = EXIT_OK
    try:
        table = run_replicates(sc, workers=workers)
    except SimulationFailed as exc:
        table, code = exc.table, EXIT_NONCONV
        _report(exc, EXIT_NONCONV)
    table.to_csv(f"{args.out}.metrics.csv")
    table.to_json(f"{args.out}.metrics.json")
    return code


# --- entry point -----------------------------------------------------------------


def _report(exc, code) -> None:
    info = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("row", "col", "column", "value", "iterations", "grad_norm"):
        if getattr(exc, attr, None) is not None:
            info[attr] = _clean(getattr(exc, attr))
    if isinstance(exc, InvalidDataset):
        info["violations"] = [str(v) for v in exc.violations]
    print(json.dumps(info, sort_keys=True, default=str), file=sys.stderr)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        _report(exc, EXIT_USAGE)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        _report(exc, code)
        return code


def _exit_code(exc):
    if isinstance(exc, UsageError):
        return EXIT_USAGE
    if isinstance(exc, (DataError, EmptyWindow, OSError)):
        return EXIT_DATA
    if isinstance(exc, NonConvergence):
        return EXIT_NONCONV
    if isinstance(exc, (BalcauseError, ValueError)):
        return EXIT_USAGE
    return None

if __name__ == "__main__":
    sys.exit(main())
