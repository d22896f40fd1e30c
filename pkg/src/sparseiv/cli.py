"""Command-line entry point: ``sparseiv {simulate,fit,penalty,diagnose}``.

Every option can also come from a ``key = value`` file passed with
``--config``; options given on the command line win over the file.

Exit codes: 0 success (including an empty instrument selection), 2 usage or
configuration error, 3 data contract violation, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics, montecarlo, penalty
from .errors import (
    DimensionMismatch,
    EigenFailure,
    NonConvergence,
    NotNormalized,
    PerfectFit,
    RankDeficient,
    SingularSystem,
    SparseIVError,
    TooLarge,
    ZeroColumn,
)
from .iv import (
    Status,
    critical_value,
    fit_2sls,
    fit_fuller,
    fit_sparse_iv,
    partial_out_controls,
    select_instruments,
)
from .model import IvDataset, normalize_columns, read_csv, write_csv
from .solvers import Method

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

OUTPUT_DIR_ENV = "SPARSEIV_OUTPUT_DIR"

_DATA_ERRORS = (DimensionMismatch, ZeroColumn, NotNormalized, FileNotFoundError)
_NUMERIC_ERRORS = (
    NonConvergence,
    PerfectFit,
    RankDeficient,
    SingularSystem,
    EigenFailure,
    np.linalg.LinAlgError,
)


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _float_list(text):
    return [float(x) for x in str(text).split(",") if x.strip()]


def _int_list(text):
    return [int(x) for x in str(text).split(",") if x.strip()]


def _str_list(text):
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(sub):
    sub.add_argument("--config", help="key = value file; command-line flags override it")
    sub.add_argument("--seed", type=int, help="random seed (required for simulate and penalty)")
    sub.add_argument(
        "--format", choices=("table", "csv", "json"), default="table", help="standard output format"
    )
    sub.add_argument(
        "--output-dir",
        help=f"directory for result files (default: ${OUTPUT_DIR_ENV} or the current directory)",
    )


def _design_options(sub, multi=False):
    kind = _str_list if multi else str
    sub.add_argument("--design", type=kind, default=kind("cutoff"), help="cutoff or exponential")
    sub.add_argument("--n", type=_int_list if multi else int, default=(_int_list if multi else int)("500"))
    sub.add_argument("--p", type=int, default=100, help="number of instruments")
    sub.add_argument("--rho", type=float, default=0.5, help="Toeplitz correlation of the instruments")
    sub.add_argument(
        "--fstar", type=_float_list if multi else float, default=(_float_list if multi else float)("160"),
        help="first-stage concentration F*",
    )
    sub.add_argument(
        "--corr", type=_float_list if multi else float, default=(_float_list if multi else float)("0.3"),
        help="Corr(e, v)",
    )
    sub.add_argument("--sigma-e2", type=float, default=1.0, help="structural error variance")


def _penalty_options(sub):
    sub.add_argument("--c", type=float, default=penalty.DEFAULT_C, help="penalty slack constant")
    sub.add_argument("--gamma", type=float, default=None, help="penalty error level (default 1/p)")
    sub.add_argument("--n-sim", type=int, default=penalty.DEFAULT_N_SIM, help="score simulation draws")


def build_parser():
    parser = _Parser(prog="sparseiv", description=__doc__.split("\n")[0])
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)

    sim = subs.add_parser("simulate", help="run Monte Carlo design cells")
    _common(sim)
    _design_options(sim, multi=True)
    sim.add_argument("--grid", choices=("standard",), help="run all 24 standard cells")
    sim.add_argument("--reps", type=int, default=500, help="replications per cell")
    sim.add_argument(
        "--estimators", type=_str_list, default=None,
        help="comma-separated subset of: " + ", ".join(montecarlo.ESTIMATORS),
    )
    sim.add_argument("--jobs", type=int, default=1, help="worker processes")
    sim.add_argument("--n-sim", type=int, default=penalty.DEFAULT_N_SIM, help="score simulation draws")
    sim.add_argument("--c", type=float, default=penalty.DEFAULT_C, help="penalty slack constant")
    sim.add_argument("--k-folds", type=int, default=10, help="cross-validation folds")
    sim.add_argument(
        "--dump-data", type=_int_list, default=None,
        help="also write the simulated data of these replications as CSV",
    )
    sim.add_argument("--progress", type=_bool, nargs="?", const=True, default=False,
                     help="replication counter on standard error")

    fit = subs.add_parser("fit", help="sparse IV on a CSV dataset")
    _common(fit)
    fit.add_argument("data", nargs="?", help="CSV with y1, y2, w_* controls and z_* instruments")
    fit.add_argument("--method", choices=[m.value for m in Method], default=Method.POST_LASSO.value)
    fit.add_argument(
        "--penalty", choices=[r.value for r in penalty.PenaltyRule], default=None,
        help="penalty rule (default matches the method)",
    )
    fit.add_argument("--second-stage", choices=("2sls", "optimal", "fuller"), default="2sls")
    fit.add_argument("--compare", type=_bool, nargs="?", const=True, default=False,
                     help="also report 2SLS and Fuller on the same selection")
    fit.add_argument("--sigma-v", type=float, default=None, help="known first-stage noise level")
    fit.add_argument("--k-folds", type=int, default=10)
    _penalty_options(fit)

    pen = subs.add_parser("penalty", help="score quantiles and resolved penalty levels")
    _common(pen)
    pen.add_argument("data", nargs="?", help="CSV dataset; omit to simulate a design")
    _design_options(pen)
    _penalty_options(pen)
    pen.add_argument("--sigma-v", type=float, default=None, help="known first-stage noise level")

    diag = subs.add_parser("diagnose", help="sparse and restricted eigenvalues of the Gram matrix")
    _common(diag)
    diag.add_argument("data", nargs="?", help="CSV dataset; omit to simulate a design")
    _design_options(diag)
    diag.add_argument("--m", type=int, default=None, help="sparsity of the eigenvalue search")
    diag.add_argument("--mode", choices=[m.value for m in diagnostics.Mode], default="exact")
    diag.add_argument("--C", dest="C", type=float, default=3.0, help="cone constant")
    diag.add_argument("--support", type=_int_list, default=None, help="support T (0-based)")
    diag.add_argument("--samples", type=int, default=200, help="sign patterns to sample")
    return parser


def read_config(path):
    """Parse a flat ``key = value`` file; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        raise UsageError("a command is required")
    if args.config:
        cfg = read_config(args.config)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        for key in cfg:
            if key not in known or key in ("help", "config"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
        # config values become defaults, then the command line is parsed again
        defaults = {}
        for key, value in cfg.items():
            action = known[key]
            conv = action.type or str
            try:
                if action.dest in ("data",):
                    defaults[key] = value
                else:
                    defaults[key] = conv(value)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config key {key!r}: {exc}") from exc
            if action.choices is not None and defaults[key] not in action.choices:
                raise UsageError(f"config key {key!r}: {value!r} not in {list(action.choices)}")
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
        if getattr(args, "data", None) is None and "data" in defaults:
            args.data = defaults["data"]
    return args


def _output_dir(args):
    path = Path(args.output_dir or os.environ.get(OUTPUT_DIR_ENV) or ".")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _num(x):
    """Full-precision text for CSV output."""
    if x is None:
        return ""
    return format(float(x), ".17g")


def _json_num(x):
    if x is None:
        return None
    x = float(x)
    return None if math.isnan(x) or math.isinf(x) else x


def _f4(x):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.4f}"


def _emit(text):
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --------------------------------------------------------------------------
# simulate


def _cells(args):
    if args.grid == "standard":
        return montecarlo.standard_grid(
            n_reps=args.reps, rng_seed=args.seed, p=args.p, rho=args.rho, sigma_e2=args.sigma_e2,
            c=args.c, n_sim=args.n_sim, k_folds=args.k_folds,
        )
    cells = []
    for design, n, corr, f_star in itertools.product(args.design, args.n, args.corr, args.fstar):
        cells.append(
            montecarlo.McDesign(
                n=n, p=args.p, design=design, corr_ev=corr, f_star=f_star, sigma_e2=args.sigma_e2,
                rho=args.rho, n_reps=args.reps, rng_seed=args.seed, c=args.c, n_sim=args.n_sim,
                k_folds=args.k_folds,
            )
        )
    return cells


def cmd_simulate(args):
    if args.seed is None:
        raise UsageError("simulate requires --seed")
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    estimators = tuple(args.estimators) if args.estimators else montecarlo.DEFAULT_ESTIMATORS
    unknown = [e for e in estimators if e not in montecarlo.ESTIMATORS]
    if unknown:
        raise UsageError(f"unknown estimator(s) {', '.join(unknown)}")
    try:
        cells = _cells(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out_dir = _output_dir(args)
    stdout_parts = []
    json_cells = []
    for design in cells:
        stem = f"{design.label()}_seed{design.rng_seed}"
        if args.dump_data:
            for rep in args.dump_data:
                if not 0 <= rep < design.n_reps:
                    raise UsageError(f"--dump-data replication {rep} outside 0..{design.n_reps - 1}")
                data, _ = montecarlo.gen_replication(design, rep)
                write_csv(data, out_dir / f"{stem}_rep{rep}.csv")
        progress = _counter(design.label()) if args.progress else None
        try:
            result = montecarlo.run_cell(design, estimators, jobs=args.jobs, progress=progress)
        except Exception as exc:  # a broken cell must not stop the grid
            msg = f"cell {design.label()} failed: {type(exc).__name__}: {exc}"
            print(msg, file=sys.stderr)
            stdout_parts.append(msg)
            continue
        (out_dir / f"{stem}.csv").write_text(result.to_csv())
        (out_dir / f"{stem}.json").write_text(_result_json(result) + "\n")
        (out_dir / f"{stem}_audit.csv").write_text(result.audit_csv())
        if args.format == "csv":
            stdout_parts.append(result.to_csv())
        elif args.format == "json":
            json_cells.append(json.loads(_result_json(result)))
        else:
            stdout_parts.append(result.table())
    if args.format == "json":
        _emit(json.dumps(json_cells, indent=2))
    else:
        _emit("\n\n".join(s.rstrip("\n") for s in stdout_parts))
    return EXIT_OK


def _counter(label):
    def progress(done, total):
        print(f"\r{label}: {done}/{total}", end="" if done < total else "\n", file=sys.stderr)

    return progress


def _result_json(result):
    payload = result.to_dict()
    for row in payload["estimators"].values():
        for k, v in row.items():
            if isinstance(v, float):
                row[k] = _json_num(v)
    return json.dumps(payload, indent=2)


# --------------------------------------------------------------------------
# fit


def _load(path) -> IvDataset:
    if path is None:
        raise UsageError("a data CSV is required")
    try:
        return read_csv(path)
    except _DATA_ERRORS as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _default_rule(method: Method):
    return penalty.PenaltyRule.PLUGIN_SQRT_LASSO if method.is_sqrt else penalty.PenaltyRule.PLUGIN_LASSO


def _penalty_spec(args, rule):
    try:
        return penalty.PenaltySpec(
            rule=rule, c=args.c, gamma=args.gamma, n_sim=args.n_sim, k_folds=getattr(args, "k_folds", 10)
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _est_row(label, est, level=0.05):
    row = {"estimator": label, "status": est.status.value, "alpha1": None, "se1": None,
           "ci_low": None, "ci_high": None, "n_instruments": est.method.get("n_selected")}
    if est.status is Status.OK:
        z = critical_value(level)
        row.update(
            alpha1=est.alpha1, se1=est.se1, ci_low=est.alpha1 - z * est.se1, ci_high=est.alpha1 + z * est.se1
        )
    else:
        row["reason"] = est.reason
    return row


def cmd_fit(args):
    method = Method(args.method)
    rule = penalty.PenaltyRule(args.penalty) if args.penalty else _default_rule(method)
    spec = _penalty_spec(args, rule)
    data = _load(args.data)
    seed = 0 if args.seed is None else args.seed
    est = fit_sparse_iv(data, method, spec, seed, second_stage=args.second_stage, sigma_v=args.sigma_v)
    selected = est.method.get("selected", [])
    names = [data.instrument_names[j] for j in selected]
    label = {"2sls": "IV", "optimal": "IV-OPT", "fuller": "FULLER"}[args.second_stage]
    rows = [_est_row(f"{label}-{method.value.upper()}", est)]
    if args.compare and selected:
        rows.append(_est_row("2SLS(selected)", _safe(lambda: fit_2sls(data, selected))))
        rows.append(_est_row("FULLER(selected)", _safe(lambda: fit_fuller(data, selected))))
    report = {
        "n": data.n,
        "p": data.p,
        "controls": data.k_w,
        "method": method.value,
        "penalty": rule.value,
        "lambda": _json_num(est.method.get("lambda")),
        "n_selected": len(selected),
        "selected": names,
        "rows": [{k: (_json_num(v) if isinstance(v, float) else v) for k, v in r.items()} for r in rows],
    }
    if args.format == "json":
        _emit(json.dumps(report, indent=2))
    elif args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "status", "alpha1", "se1", "ci_low", "ci_high", "n_instruments"])
        for r in rows:
            w.writerow([r["estimator"], r["status"], _num(r["alpha1"]), _num(r["se1"]),
                        _num(r["ci_low"]), _num(r["ci_high"]), r["n_instruments"]])
        _emit(buf.getvalue())
    else:
        lines = [
            f"n = {data.n}, instruments = {data.p}, controls = {data.k_w}",
            f"first stage: {method.value}, penalty: {rule.value}, lambda = {_f4(est.method.get('lambda'))}",
            f"selected {len(selected)} instrument(s): {', '.join(names) if names else '(none)'}",
        ]
        if est.status is Status.NO_INSTRUMENTS:
            lines.append("no instruments selected: the sparse IV estimate is not defined for this sample")
        lines.append(f"{'estimator':<20}{'alpha1':>10}{'se':>10}{'95% interval':>24}")
        for r in rows:
            if r["status"] == Status.OK.value:
                ci = f"[{_f4(r['ci_low'])}, {_f4(r['ci_high'])}]"
                lines.append(f"{r['estimator']:<20}{_f4(r['alpha1']):>10}{_f4(r['se1']):>10}{ci:>24}")
            else:
                lines.append(f"{r['estimator']:<20}  {r['status']}: {r.get('reason', '')}")
        _emit("\n".join(lines))
    return EXIT_OK


def _safe(fn):
    from .iv import IvEstimate

    try:
        return fn()
    except (SparseIVError, np.linalg.LinAlgError) as exc:
        return IvEstimate.failed({}, f"{type(exc).__name__}: {exc}")


# --------------------------------------------------------------------------
# penalty / diagnose


def _design_data(args):
    """The CSV dataset, or replication 0 of the requested design."""
    if args.data:
        return _load(args.data), None
    try:
        design = montecarlo.McDesign(
            n=args.n, p=args.p, design=args.design, corr_ev=args.corr, f_star=args.fstar,
            sigma_e2=args.sigma_e2, rho=args.rho, n_reps=1, rng_seed=0 if args.seed is None else args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data, truth = montecarlo.gen_replication(design, 0)
    return data, truth


def cmd_penalty(args):
    if args.seed is None:
        raise UsageError("penalty requires --seed")
    data, _ = _design_data(args)
    y2, F_raw, _ = partial_out_controls(data)
    F = normalize_columns(F_raw).F
    n, p = F.shape
    gamma = args.gamma if args.gamma is not None else 1.0 / p
    if not 0 < gamma < 1:
        raise UsageError("--gamma must lie in (0, 1)")
    if args.n_sim < 1000:
        raise UsageError("--n-sim must be at least 1000")
    lam_q = penalty.simulate_score_quantile_lasso(F, gamma, args.n_sim, args.seed)
    sq_q = penalty.simulate_score_quantile_sqrt_lasso(F, gamma, args.n_sim, args.seed)
    normal_bound, log_bound = penalty.analytic_bounds(n, p, gamma)
    if args.sigma_v is not None:
        sigma_v, sigma_source = args.sigma_v, "given"
    else:
        sigma_v = penalty.estimate_sigma_v(F, y2, args.c, gamma, args.n_sim, args.seed, quantile=lam_q)
        sigma_source = "estimated"
    report = {
        "n": n,
        "p": p,
        "gamma": gamma,
        "c": args.c,
        "n_sim": args.n_sim,
        "Lambda": lam_q,
        "Lambda_sqrt": sq_q,
        "bound_normal": normal_bound,
        "bound_log": log_bound,
        "sigma_v": float(sigma_v),
        "sigma_v_source": sigma_source,
        "lambda_lasso": args.c * 2.0 * float(sigma_v) * lam_q,
        "lambda_sqrt_lasso": args.c * sq_q,
    }
    _emit_kv(args, report)
    return EXIT_OK


def _emit_kv(args, report):
    if args.format == "json":
        _emit(json.dumps({k: (_json_num(v) if isinstance(v, float) else v) for k, v in report.items()}, indent=2))
        return
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["key", "value"])
        for k, v in report.items():
            w.writerow([k, _num(v) if isinstance(v, float) else v])
        _emit(buf.getvalue())
        return
    width = max(len(k) for k in report)
    _emit("\n".join(
        f"{k:<{width}}  {_f4(v) if isinstance(v, float) else v}" for k, v in report.items()
    ))


def cmd_diagnose(args):
    data, truth = _design_data(args)
    # the Gram matrix is over the instruments left after partialling out the
    # controls; supports are reported in original column numbers
    _, F_raw, keep = partial_out_controls(data)
    F = normalize_columns(F_raw).F
    p = F.shape[1]
    m = args.m if args.m is not None else min(5, p)
    if not 1 <= m <= p:
        raise UsageError(f"--m must lie in [1, {p}], got {m}")
    if args.C <= 0:
        raise UsageError("--C must be positive")
    M = diagnostics.gram_matrix(F)
    try:
        sparse = diagnostics.sparse_eigenvalues(M, m, args.mode)
    except TooLarge as exc:
        raise UsageError(f"{exc}; use --mode greedy") from exc
    position = {int(j): k for k, j in enumerate(keep)}
    if args.support is not None:
        missing = [j for j in args.support if j not in position]
        if missing:
            raise UsageError(f"--support columns {missing} are not usable instruments")
        T = [position[j] for j in args.support]
        T_source = "given"
    elif truth is not None:
        T = [position[int(j)] for j in np.flatnonzero(truth.beta0)]
        T_source = "true support"
    else:
        seed = 0 if args.seed is None else args.seed
        spec = penalty.PenaltySpec(rule=penalty.PenaltyRule.PLUGIN_LASSO)
        fit, _, _ = select_instruments(data, Method.LASSO, spec, seed)
        T = list(fit.support)
        T_source = "plug-in LASSO selection"
        if not T:
            raise UsageError("the plug-in LASSO selected nothing; pass --support")
    re = diagnostics.restricted_eigenvalue_estimate(
        M, T, args.C, n_samples=args.samples, rng_seed=0 if args.seed is None else args.seed
    )
    report = {
        "p": p,
        "m": m,
        "mode": diagnostics.Mode(args.mode).value,
        "phi_min": sparse.phi_min,
        "phi_max": sparse.phi_max,
        "exact": sparse.exact,
        "phi_min_lower": float(sparse.phi_min_bounds[0]),
        "phi_min_upper": float(sparse.phi_min_bounds[1]),
        "phi_max_lower": float(sparse.phi_max_bounds[0]),
        "phi_max_upper": float(sparse.phi_max_bounds[1]),
        "support": " ".join(str(int(keep[k])) for k in T),
        "support_source": T_source,
        "C": float(args.C),
        "kappa_hat": re.kappa_hat,
        "kappa_exact": re.kappa_exact,
        "sign_patterns": re.samples,
    }
    _emit_kv(args, report)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "penalty": cmd_penalty, "diagnose": cmd_diagnose}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"sparseiv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"sparseiv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _DATA_ERRORS as exc:
        print(f"sparseiv: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"sparseiv: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
