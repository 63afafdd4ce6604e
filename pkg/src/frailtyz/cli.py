"""Command-line interface: ``frailtyz <fit|residuals|test|simulate|plot> ...``.

Exit codes: 0 success, 2 invalid input, 3 non-convergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import gof, plots
from . import residuals as res
from .data import DataError, Schema, load_csv
from .frailty import Covariate, FrailtyFit, ModelSpec, SingularHessianError, fit_ppl
from .simulation import ExperimentGrid, run_grid, write_grid_outputs

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3

RESIDUAL_KINDS = ("cs", "martingale", "deviance", "censored-z", "z")
TEST_METHODS = ("z-sw", "z-sf", "z-ks", "dev-sw", "cz-csf", "z-aov-lp", "z-aov-cov")


class UsageError(Exception):
    pass


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _load_fit(fit_path, data_path):
    try:
        d = json.loads(Path(fit_path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{fit_path}: not valid JSON ({exc})") from None
    fit = FrailtyFit.from_dict(d)
    schema = Schema.from_dict(d["schema"]) if "schema" in d else None
    return fit, load_csv(data_path, schema)


# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    covs = [Covariate.parse(c) for c in args.covariate]
    columns = tuple(dict.fromkeys(c.column for c in covs))
    schema = Schema(args.time, args.status, args.cluster, columns)
    ds = load_csv(args.data, schema)
    fit = fit_ppl(ds, ModelSpec(tuple(covs), frailty=not args.no_frailty))
    out = fit.to_dict()
    out["schema"] = schema.to_dict()
    _write_json(args.out, out)
    if not fit.converged:
        print(f"warning: {fit.message}", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_residuals(args) -> int:
    fit, ds = _load_fit(args.fit, args.data)
    rs = res.compute(args.kind, fit, ds, args.seed)
    rs.to_csv(args.out)
    return EXIT_OK


def cmd_test(args) -> int:
    fit, ds = _load_fit(args.fit, args.data)
    method = gof.normalize_method(args.method)
    cov = Covariate.parse(args.cov) if args.cov else None
    if method == "Z-AOV-COV" and cov is None:
        raise UsageError("--method z-aov-cov needs --cov")
    if args.replicates:
        rep = gof.replicate_tests(fit, ds, [method], args.replicates, args.seed,
                                  covariate=cov, k=args.k)[method]
        out = rep.to_dict()
        out["seed"] = args.seed
        out["k"] = args.k
    else:
        out = gof.run_test(method, fit, ds, seed=args.seed, covariate=cov, k=args.k).to_dict()
        out["seed"] = args.seed
    _write_json(args.out, out)
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{args.config}: not valid JSON ({exc})") from None
    seed = args.seed if args.seed is not None else cfg.get("seed")
    if seed is None:
        raise UsageError("simulate needs a seed (--seed or a 'seed' key in the config)")
    if args.full_scale:
        cfg["full_scale"] = True
    grid = ExperimentGrid.from_dict(cfg)
    parallelism = args.parallelism or cfg.get("parallelism")
    out_dir = Path(args.out_dir)
    result = run_grid(grid, parallelism=parallelism, seed=int(seed),
                      dataset_dir=out_dir / "datasets")
    write_grid_outputs(result, out_dir)
    return EXIT_OK


def _x_values(fit, ds, x_source, z):
    if x_source is None or x_source.upper() == "LP":
        return z.linear_predictors, "linear predictor"
    cov = Covariate.parse(x_source)
    return cov.values(ds), cov.label


def cmd_plot(args) -> int:
    fit, ds = _load_fit(args.fit, args.data)
    spec = plots.PlotSpec(args.kind, Path(args.svg), Path(args.csv), args.x, args.k)
    needs_seed = args.kind in ("qq", "scatter_lowess", "grouped_box", "pvalue_hist")
    if needs_seed and args.seed is None:
        raise UsageError(f"plot kind {args.kind} uses randomized residuals and needs --seed")
    if args.kind == "chf45":
        cs = res.cox_snell(fit, ds)
        plots.render_chf45(spec, gof.km_chf(cs))
    elif args.kind == "pvalue_hist":
        if not args.method:
            raise UsageError("pvalue_hist needs --method")
        method = gof.normalize_method(args.method)
        cov = Covariate.parse(args.cov) if args.cov else None
        rep = gof.replicate_tests(fit, ds, [method], args.replicates, args.seed,
                                  covariate=cov, k=args.k)[method]
        plots.render_pvalue_hist(spec, rep.p_values, rep.p_min, test_name=method)
    else:
        z = res.z_residual(fit, ds, args.seed)
        if args.kind == "qq":
            plots.render_qq(spec, z.values)
        else:
            x, label = _x_values(fit, ds, args.x, z)
            if args.kind == "scatter_lowess":
                plots.render_scatter_lowess(spec, x, z.values, xlabel=label)
            else:
                plots.render_grouped_box(spec, x, z.values, xlabel=label)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="frailtyz", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a (frailty) Cox model")
    f.add_argument("--data", required=True)
    f.add_argument("--time", required=True)
    f.add_argument("--status", required=True)
    f.add_argument("--cluster", required=True)
    f.add_argument("--covariate", action="append", required=True, metavar="COL[:log]")
    f.add_argument("--no-frailty", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("residuals", help="write residuals of a fitted model")
    r.add_argument("--fit", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--kind", required=True, choices=RESIDUAL_KINDS)
    r.add_argument("--seed", type=_u64)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_residuals)

    t = sub.add_parser("test", help="goodness-of-fit and homogeneity tests")
    t.add_argument("--fit", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--method", required=True, type=str.lower, choices=TEST_METHODS)
    t.add_argument("--cov", metavar="NAME[:log]")
    t.add_argument("--k", type=_positive, default=10)
    t.add_argument("--seed", type=_u64)
    t.add_argument("--replicates", type=_positive, metavar="J")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="run a rejection-rate grid")
    s.add_argument("--config", required=True, help="JSON file with ExperimentGrid fields")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=_u64)
    s.add_argument("--full-scale", action="store_true")
    s.add_argument("--parallelism", type=_positive)
    s.set_defaults(func=cmd_simulate)

    g = sub.add_parser("plot", help="write an SVG diagnostic plot and its CSV")
    g.add_argument("--kind", required=True, choices=plots.PLOT_KINDS)
    g.add_argument("--fit", required=True)
    g.add_argument("--data", required=True)
    g.add_argument("--x", metavar="NAME[:log]|LP")
    g.add_argument("--svg", required=True)
    g.add_argument("--csv", required=True)
    g.add_argument("--seed", type=_u64)
    g.add_argument("--k", type=_positive, default=10)
    g.add_argument("--method", type=str.lower, choices=TEST_METHODS)
    g.add_argument("--cov", metavar="NAME[:log]")
    g.add_argument("--replicates", type=_positive, default=1000, metavar="J")
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    randomized = (args.command in ("test",) and args.method not in ("dev-sw", "cz-csf")) or \
                 (args.command == "residuals" and args.kind == "z")
    try:
        if randomized and args.seed is None:
            raise UsageError(f"{args.command} uses randomized residuals and needs --seed")
        return args.func(args)
    except SingularHessianError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (UsageError, DataError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
