"""Command-line front end: fit, impute, analyze, simulate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_dataset
from .estimands import CdfCurve, describe, parse_estimand, solve_di
from .imputation import derive_seeds, impute, write_completed
from .inference import BootstrapConfig, mi_inference, weighted_bootstrap
from .mmrm import MmrmFit
from .mmrm import fit as fit_mmrm
from .sensitivity import SensitivityModel
from .simulation import PRESETS, metrics_table, preset, run_monte_carlo, write_metrics_csv

log = logging.getLogger("distimp")

MODEL_HELP = """\
sensitivity models for subjects who drop out after visit k:
  mar      missing outcomes drawn from the subject's own arm given its observed history
  j2r      jump to reference: after dropout the subject follows the control arm mean
           profile; the covariance used for conditioning is the control covariance.
           Controls are imputed exactly as under mar
  rtb      return to baseline: only the final visit is imputed, from the arm's
           baseline distribution given covariates; later observed outcomes are ignored
  washout  controls as mar, treated subjects as rtb
"""

ESTIMAND_HELP = "ate | ate-ancova | risk:C (P(Y_T >= C) difference) | qte:Q | cdf:LO:HI:N (repeatable)"

# keys that do not change results and are therefore not embedded in artifacts
EXECUTION_KEYS = {"workers", "config", "log_level", "out", "out_dir", "command", "func"}


class ConfigError(ValueError):
    pass


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Keys are flag names."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _common(p):
    p.add_argument("--config", help="flat key = value file; command-line flags take precedence")
    p.add_argument("--log-level", default="WARNING")


def _data_args(p):
    p.add_argument("--input", help="wide CSV: id, x1..xp, group (1 control, 2 treatment), y1..yT")
    p.add_argument("--group-col", default="group")
    p.add_argument("--id-col", default="id")


def _model_args(p):
    p.add_argument("--model", type=SensitivityModel.parse, default=SensitivityModel.J2R, help="mar, j2r, rtb or washout")
    p.add_argument("--M", type=int, default=100, help="imputations per incomplete subject")
    p.add_argument("--seed", type=int, default=0, help="single source of all randomness")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distimp",
        description="MMRM-based multiple and distributional imputation for longitudinal trials.",
        epilog=MODEL_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the group-specific MMRM", epilog=MODEL_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    _data_args(p)
    p.add_argument("--out", default="fit.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("impute", help="draw M completions per incomplete subject", epilog=MODEL_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    _data_args(p)
    _model_args(p)
    p.add_argument("--fit", help="reuse a fit JSON instead of refitting")
    p.add_argument("--emit", type=int, action="append", default=None, metavar="m",
                   help="write the m-th completed dataset as CSV (repeatable)")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("analyze", help="MI (Rubin) or DI (weighted bootstrap) inference", epilog=MODEL_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    _data_args(p)
    _model_args(p)
    p.add_argument("--method", choices=("mi", "di", "both"), default="di")
    p.add_argument("--estimand", action="append", default=None, help=ESTIMAND_HELP)
    p.add_argument("--B", type=int, default=100, help="bootstrap replicates")
    p.add_argument("--weights", choices=("exp1", "poisson1"), default="exp1", help="bootstrap weight distribution")
    p.add_argument("--out-dir", default=".")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="Monte Carlo comparison of MI and DI on a preset scenario",
                       epilog=MODEL_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    _common(p)
    p.add_argument("--preset", choices=PRESETS, default="j2r-ate")
    p.add_argument("--N", type=int, default=1000, help="subjects per arm")
    p.add_argument("--M", type=int, default=100)
    p.add_argument("--B", type=int, default=100)
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--weights", choices=("exp1", "poisson1"), default="exp1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1, help="parallel processes; never changes results")
    p.add_argument("--out", default="metrics.csv")
    p.set_defaults(func=cmd_simulate)
    return parser


def parse_args(argv=None):
    """Parse with precedence: built-in defaults < config file < command-line flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_config(args.config)
        sub = _subparser(parser, args.command)
        known = {a.dest for a in sub._actions}
        unknown = set(cfg) - known - {"config"}
        if unknown:
            raise ConfigError(f"config keys not valid for {args.command!r}: {', '.join(sorted(unknown))}")
        if "estimand" in cfg:
            cfg["estimand"] = [s.strip() for s in cfg["estimand"].split(",") if s.strip()]
        if "emit" in cfg:
            cfg["emit"] = [int(s) for s in cfg["emit"].split(",") if s.strip()]
        sub.set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def resolved_config(args) -> dict:
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in EXECUTION_KEYS:
            continue
        out[k] = v.value if isinstance(v, SensitivityModel) else v
    return out


def _load(args):
    if not args.input:
        raise ConfigError("an --input file is required")
    return load_dataset(args.input, {"group": args.group_col, "id": args.id_col})


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_fit(args):
    ds = _load(args)
    fit = fit_mmrm(ds)
    _write_json(
        args.out,
        {
            "config": resolved_config(args),
            "n_subjects": ds.n_subjects,
            "patterns": {f"{g}:{k}": c for (g, k), c in sorted(ds.pattern_counts().items())},
            "fit": fit.to_dict(),
        },
    )
    print(f"fit: n={ds.n_subjects} T={ds.n_visits} loglik={fit.loglik:.4f} -> {args.out}")


def _fit_for(args, ds):
    if getattr(args, "fit", None):
        fit = MmrmFit.from_dict(json.loads(Path(args.fit).read_text())["fit"])
        if fit.n_visits != ds.n_visits or fit.n_covariates != ds.n_covariates:
            raise ValueError("fit JSON does not match the dataset dimensions")
        return fit
    return fit_mmrm(ds)


def cmd_impute(args):
    ds = _load(args)
    fit = _fit_for(args, ds)
    imp_seed, _ = derive_seeds(args.seed)
    iset = impute(fit, ds, args.model, args.M, imp_seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = _comment_header(resolved_config(args))
    written = []
    for m in args.emit or []:
        path = out / f"completed_m{m}.csv"
        write_completed(iset, ds, m, path)
        _prepend(path, header)
        written.append(str(path))
    _write_json(
        out / "imputation.json",
        {
            "config": resolved_config(args),
            "imputation_seed": imp_seed,
            "fit_fingerprint": fit.fingerprint(),
            "imputation_fingerprint": iset.fingerprint(),
            "incomplete_subjects": int(sum(b.subjects.size for b in iset.blocks)),
            "completed_files": written,
        },
    )
    print(f"impute: model={iset.model.value} M={iset.M} fingerprint={iset.fingerprint()}")


def _comment_header(cfg) -> str:
    return "".join(f"# {k} = {v}\n" for k, v in cfg.items())


def _prepend(path, text):
    path = Path(path)
    path.write_text(text + path.read_text())


def _write_cdf(path, grid, values, header):
    with open(path, "w") as fh:
        fh.write(header)
        fh.write("t,F\n")
        for t, f in zip(grid, values):
            fh.write(f"{t!r},{float(f)!r}\n")


def cmd_analyze(args):
    ds = _load(args)
    specs = [parse_estimand(e) for e in (args.estimand or ["ate-ancova"])]
    fit = _fit_for(args, ds)
    imp_seed, boot_seed = derive_seeds(args.seed)
    iset = impute(fit, ds, args.model, args.M, imp_seed)
    cfg = resolved_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    methods = ("mi", "di") if args.method == "both" else (args.method,)
    results = []
    for spec in specs:
        for method in methods:
            if method == "mi":
                res = mi_inference(iset, ds, spec)
            else:
                res = weighted_bootstrap(iset, ds, fit, spec, BootstrapConfig(args.B, args.weights, boot_seed))
            entry = {"estimand": describe(spec), **res.to_dict()}
            results.append(entry)
            if np.ndim(res.tau_hat) == 0:
                lo, hi = res.ci
                print(
                    f"{describe(spec):12} {res.method:22} tau={res.tau_hat:.4f} se={res.se:.4f} "
                    f"ci=({lo:.4f}, {hi:.4f}) p={res.p_value:.4g}"
                )
            else:
                print(f"{describe(spec):12} {res.method:22} curve over {np.size(res.tau_hat)} grid points")
        if isinstance(spec, CdfCurve):
            pe = solve_di(iset, ds, spec)
            header = _comment_header(cfg)
            for g, curve in ((1, pe.tau_1), (2, pe.tau_2)):
                _write_cdf(out / f"cdf_group{g}.csv", spec.grid, curve, header)
    _write_json(
        out / "analysis.json",
        {
            "config": cfg,
            "imputation_seed": imp_seed,
            "bootstrap_seed": boot_seed,
            "fit_fingerprint": fit.fingerprint(),
            "imputation_fingerprint": iset.fingerprint(),
            "results": results,
        },
    )


def cmd_simulate(args):
    scn = preset(args.preset, N=args.N, M=args.M, B=args.B, n_reps=args.reps, seed=args.seed,
                 weight_scheme=args.weights)
    if args.reps < 2:
        raise ValueError("--reps must be at least 2")
    result = run_monte_carlo(scn, workers=args.workers)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result, args.out, {"preset": args.preset})
    print(f"{args.preset}: truth {result.truth:.4f}, {scn.n_reps - result.failures}/{scn.n_reps} replications")
    print(metrics_table(result))


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"distimp: config error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, RuntimeError, OSError, np.linalg.LinAlgError) as exc:
        module = type(exc).__module__.rpartition(".")[2]
        print(f"distimp: error in {module}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
