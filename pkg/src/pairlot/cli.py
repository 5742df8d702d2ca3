"""Command-line interface: simulate, estimate, replicate, t-table, true-estimand.

Exit codes: 0 success, 2 configuration error, 3 runtime or validation error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .data import DataFormatError, load_csv, save_counterfactual_csv, save_csv, validate
from .dgp import DgpConfig, Setting, generate, t_distribution_table, true_estimand
from .estimators import RESULT_FIELDS, EstimationError
from .harness import (METHODS, ExperimentConfig, _apply, _Fits, compare_t_table,
                      compare_to_reference, load_reference, manifest, metrics_markdown,
                      write_outputs)
from .learners import LearnerSpec

log = logging.getLogger("pairlot")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# every recognised configuration key with its help text
KEYS = {
    "dgp.setting": "Setting1 | Setting2 | Setting3 | Example",
    "dgp.n": "sample size per simulated trial (>= 2)",
    "dgp.tau": "last visit index (>= 1)",
    "dgp.p_treat": "randomization probability P(A=1)",
    "dgp.example_params": "[beta0, beta1, gamma0, gamma1] for the Example model",
    "dgp.seed": "seed for `simulate`",
    "dgp.marker_slope": "treatment slope of the Setting 2 switching marker",
    "dgp.ice_arm_scale": "multiplier on treatment terms of the ICE model (0: T^1 = T^0)",
    "dgp.noise_sd": "SD of the Example model error",
    "dgp.unmeasured_sd": "SD of the Example model unmeasured covariate U",
    "learner.library": "base learners: mean, glm, ridge, spline, trees",
    "learner.ridge_grid": "ridge penalties (one learner each)",
    "learner.n_knots": "hinge knots per covariate for the spline learner",
    "learner.n_trees": "bagged trees",
    "learner.max_depth": "tree depth",
    "learner.min_leaf": "minimum leaf size",
    "learner.stacking": "stack learners (false: equal weights)",
    "learner.inner_folds": "inner CV folds used for stacking",
    "learner.time_encoding": "numeric | onehot encoding of the visit index",
    "learner.baseline_outcome": "include Y(0) in the adjustment set",
    "estimate.methods": "method ids: " + ", ".join(METHODS),
    "estimate.t": "horizon (default: tau)",
    "estimate.folds": "cross-fitting folds for *_CF methods",
    "estimate.n_boot": "bootstrap resamples (pairwise PLOT, SACE)",
    "estimate.alpha": "1 - confidence level",
    "estimate.seed": "seed for folds and bootstrap in `estimate`",
    "experiment.replicates": "Monte Carlo replicates R",
    "experiment.workers": "worker processes",
    "experiment.seed": "master seed; replicate k uses SeedSequence([seed, k])",
    "experiment.nuisance": "estimated | oracle (Example only) | corrupted",
    "experiment.propensity": "override the fitted P(A=1) in the estimators",
    "experiment.truth": "zero | oracle: coverage target",
    "experiment.n_oracle": "pair draws for oracle truth",
    "experiment.n_large": "sample size for the T-distribution table",
    "output.dir": "output directory (default $PAIRLOT_OUT or ./pairlot_out)",
}


class ConfigError(Exception):
    pass


# ------------------------------------------------------------------ config

def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: str | None, overrides: list[str]) -> dict:
    """Read the TOML config, apply ``section.key=value`` overrides, check keys."""
    cfg: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            cfg = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        key, value = item.split("=", 1)
        if "." not in key:
            raise ConfigError(f"override key must be section.key: {key!r}")
        section, name = key.strip().split(".", 1)
        cfg.setdefault(section, {})[name] = _parse_value(value.strip())
    for section, values in cfg.items():
        if not isinstance(values, dict):
            raise ConfigError(f"top-level key {section!r} must be a table")
        for name in values:
            if f"{section}.{name}" not in KEYS:
                raise ConfigError(f"unknown config key {section}.{name}")
    return cfg


def _dgp(cfg: dict) -> DgpConfig:
    try:
        return DgpConfig(**cfg.get("dgp", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[dgp] {exc}") from None


def _learner(cfg: dict) -> LearnerSpec:
    try:
        return LearnerSpec(**cfg.get("learner", {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[learner] {exc}") from None


def _methods(value) -> list[str]:
    methods = value.split(",") if isinstance(value, str) else list(value)
    methods = [m.strip() for m in methods if m.strip()]
    unknown = [m for m in methods if m not in METHODS]
    if unknown or not methods:
        raise ConfigError(f"unknown method ids {unknown}; known: {', '.join(METHODS)}")
    return methods


def _outdir(args, cfg) -> Path:
    import os

    out = args.out or cfg.get("output", {}).get("dir") or os.environ.get("PAIRLOT_OUT", "pairlot_out")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(path: Path, command: str, resolved: dict, extra: dict | None = None):
    info = {"package": "pairlot", "version": __version__, "command": command, "config": resolved}
    info.update(extra or {})
    path.write_text(json.dumps(info, indent=2, sort_keys=True, default=str), encoding="utf-8")


# ------------------------------------------------------------- subcommands

def cmd_simulate(args, cfg) -> int:
    dgp_cfg = dict(cfg.get("dgp", {}))
    for key in ("setting", "n", "seed"):
        if getattr(args, key) is not None:
            dgp_cfg[key] = getattr(args, key)
    dgp = _dgp({"dgp": dgp_cfg})
    outdir = _outdir(args, cfg)
    data, panel = generate(dgp)
    report = validate(data)
    if not report.ok:
        print(f"generated data failed validation:\n{report}", file=sys.stderr)
        return EXIT_RUNTIME
    data_path = outdir / f"{args.stem}.csv"
    save_csv(data, data_path)
    files = [data_path.name]
    if args.counterfactuals:
        cf_path = outdir / f"{args.stem}_counterfactual.csv"
        save_counterfactual_csv(panel, cf_path)
        files.append(cf_path.name)
    _write_manifest(outdir / f"{args.stem}_manifest.json", "simulate", {"dgp": dgp.to_dict()},
                    {"outputs": files})
    print(f"wrote {', '.join(str(outdir / f) for f in files)}")
    return EXIT_OK


def cmd_estimate(args, cfg) -> int:
    est = dict(cfg.get("estimate", {}))
    methods = _methods(args.methods if args.methods else est.get("methods", "PLOT_unadj"))
    t = args.t if args.t is not None else est.get("t")
    try:
        data = load_csv(args.data)
    except FileNotFoundError:
        print(f"data file not found: {args.data}", file=sys.stderr)
        return EXIT_RUNTIME
    report = validate(data)
    if not report.ok:
        print(f"dataset failed validation:\n{report}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        config = ExperimentConfig(
            dgp=DgpConfig(Setting.SETTING1, n=max(data.n, 2), tau=data.tau),
            replicates=1, methods=methods, t=t, folds=int(est.get("folds", 5)),
            n_boot=int(est.get("n_boot", 500)), alpha=float(est.get("alpha", 0.05)),
            seed=int(est.get("seed", 0)), learner=_learner(cfg))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    fits = _Fits(config, data, config.seed)
    outdir = _outdir(args, cfg)
    rows, failures = [], {}
    for m in methods:
        try:
            res = _apply(m, data, fits, config, config.seed)
        except EstimationError as exc:
            failures[m] = str(exc)
            continue
        rows.append({"requested": m, **res.to_row()})
    path = outdir / f"{args.stem}.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, ["requested"] + RESULT_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    _write_manifest(outdir / f"{args.stem}_manifest.json", "estimate",
                    {"data": str(args.data), "methods": methods, "t": t,
                     "folds": config.folds, "n_boot": config.n_boot, "alpha": config.alpha,
                     "seed": config.seed, "learner": asdict(config.learner)},
                    {"failures": failures})
    for r in rows:
        print(f"{r['requested']:>16}  t={r['t']}  point={float(r['point']):.6g}  "
              f"se={float(r['se']):.4g}")
    for m, msg in failures.items():
        print(f"{m}: failed: {msg}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


def _reference_key(table: int, setting, params) -> str:
    if table == 1:
        return "table1"
    if table == 2:
        s = Setting.parse(setting or "2")
        if s not in (Setting.SETTING2, Setting.SETTING3):
            raise ConfigError("table 2 covers settings 2 and 3")
        return f"table2_setting{s.value[-1]}"
    if table == 3:
        key = "table3_" + "".join(str(int(float(v))) for v in (params or "0,0,0").split(","))
        if key not in load_reference():
            raise ConfigError("table 3 params must be one of 0,0,0 / 0,1,0 / 1,1,0 / 1,1,1")
        return key
    raise ConfigError(f"unknown table {table}")


def _experiment(cfg: dict, dgp: DgpConfig, methods, R) -> ExperimentConfig:
    exp = dict(cfg.get("experiment", {}))
    est = dict(cfg.get("estimate", {}))
    exp.pop("n_large", None)
    try:
        return ExperimentConfig(
            dgp=dgp, replicates=R, methods=methods, t=est.get("t"), folds=int(est.get("folds", 5)),
            n_boot=int(est.get("n_boot", 500)), alpha=float(est.get("alpha", 0.05)),
            learner=_learner(cfg), **{k: v for k, v in exp.items() if k != "replicates"})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[experiment] {exc}") from None


def cmd_replicate(args, cfg) -> int:
    outdir = _outdir(args, cfg)
    if args.table == 4:
        return _table4(args, cfg, outdir)
    R = args.R if args.R is not None else cfg.get("experiment", {}).get("replicates", 300)
    if int(R) < 1:
        raise ConfigError("--R must be >= 1")
    if args.table is None:
        dgp = _dgp(cfg)
        methods = _methods(args.methods or cfg.get("estimate", {}).get("methods", "PLOT_unadj"))
        ref_key, reference = None, None
    else:
        ref_key = _reference_key(args.table, args.setting, args.params)
        reference = load_reference()[ref_key]
        dgp_cfg = {**cfg.get("dgp", {}), **reference["dgp"]}
        dgp = _dgp({"dgp": dgp_cfg})
        methods = _methods(args.methods) if args.methods else reference["methods"]
    if args.workers is not None:
        cfg.setdefault("experiment", {})["workers"] = args.workers
    config = _experiment(cfg, dgp, methods, int(R))
    stem = ref_key or args.stem

    def progress(done, total):
        if args.verbose and (done % 10 == 0 or done == total):
            print(f"  replicate {done}/{total}", file=sys.stderr)

    from .harness import run_experiment

    result = run_experiment(config, progress=progress)
    title = reference["title"] if reference else f"{dgp.setting.value}, R={R}"
    paths = write_outputs(result, outdir, stem, title)
    print(metrics_markdown(result.rows, title))
    status = EXIT_OK
    if reference is not None:
        checks = [c for c in reference["checks"] if c["method"] in config.methods]
        if checks:
            comparison = compare_to_reference(result, reference, checks)
            text = comparison.to_markdown()
        else:
            comparison = None
            text = "No reference checks apply to the selected methods.\n"

        (outdir / f"{stem}_comparison.md").write_text(text, encoding="utf-8")
        print(text)
        if comparison is not None:
            print("reference comparison:", "PASS" if comparison.passed else "FAIL")
        if args.strict and comparison is not None and not comparison.passed:
            status = EXIT_RUNTIME
    if not args.no_figures:
        from .report import render_experiment

        figs = render_experiment(result, outdir, stem, title)
        print("figures:", ", ".join(str(p) for p in figs.values()))
    print("outputs:", ", ".join(str(p) for p in paths.values()))
    return status


def _table4(args, cfg, outdir) -> int:
    reference = load_reference()["table4"]
    n_large = int(cfg.get("experiment", {}).get("n_large", reference["n_large"]))
    settings = [Setting.parse(args.setting)] if args.setting else \
        [Setting.SETTING1, Setting.SETTING2, Setting.SETTING3]
    base = cfg.get("dgp", {})
    all_pass = True
    lines = []
    for s in settings:
        dgp = _dgp({"dgp": {**base, "setting": s.value}})
        table = t_distribution_table(dgp, n_large)
        ref = np.asarray(reference["percentages"][s.value], float)
        rep = compare_t_table(table, ref, reference["tolerance"])
        all_pass &= rep.passed
        lines.append(f"### {s.value} (n={n_large})\n\n" + _t_table_md(table, ref) + "\n"
                     + f"within +/-{reference['tolerance']} points: {'PASS' if rep.passed else 'FAIL'}\n")
        _write_t_table(outdir / f"table4_{s.value}.csv", table)
        if not args.no_figures:
            from .report import t_distribution_bars

            t_distribution_bars(table, outdir / f"table4_{s.value}.png", ref, f"{s.value}: T by arm")
    text = "\n".join(lines)
    (outdir / "table4.md").write_text(text, encoding="utf-8")
    _write_manifest(outdir / "table4_manifest.json", "replicate --table 4",
                    {"n_large": n_large, "settings": [s.value for s in settings], "dgp": base})
    print(text)
    return EXIT_RUNTIME if (args.strict and not all_pass) else EXIT_OK


def _t_table_md(table, ref=None) -> str:
    lines = ["| T | A=0 | A=1 |" + (" ref A=0 | ref A=1 |" if ref is not None else ""),
             "|---|---|---|" + ("---|---|" if ref is not None else "")]
    for t in range(table.shape[0]):
        row = f"| {t} | {table[t, 0]:.1f} | {table[t, 1]:.1f} |"
        if ref is not None:
            row += f" {ref[t, 0]:g} | {ref[t, 1]:g} |"
        lines.append(row)
    return "\n".join(lines) + "\n"


def _write_t_table(path: Path, table):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["T", "A0_percent", "A1_percent"])
        for t in range(table.shape[0]):
            writer.writerow([t, repr(float(table[t, 0])), repr(float(table[t, 1]))])


def cmd_t_table(args, cfg) -> int:
    dgp_cfg = dict(cfg.get("dgp", {}))
    if args.setting:
        dgp_cfg["setting"] = args.setting
    dgp = _dgp({"dgp": dgp_cfg})
    n_large = args.n_large or int(cfg.get("experiment", {}).get("n_large", 1_000_000))
    if n_large < 10_000:
        raise ConfigError("--n-large must be at least 10000")
    outdir = _outdir(args, cfg)
    table = t_distribution_table(dgp, n_large)
    stem = f"{args.stem}_{dgp.setting.value}"
    _write_t_table(outdir / f"{stem}.csv", table)
    if not args.no_figures:
        from .report import t_distribution_bars

        t_distribution_bars(table, outdir / f"{stem}.png", title=f"{dgp.setting.value}: T by arm")
    _write_manifest(outdir / f"{stem}_manifest.json", "t-table",
                    {"dgp": dgp.to_dict(), "n_large": n_large})
    print(_t_table_md(table))
    return EXIT_OK


def cmd_true_estimand(args, cfg) -> int:
    dgp_cfg = dict(cfg.get("dgp", {}))
    if args.setting:
        dgp_cfg["setting"] = args.setting
    dgp = _dgp({"dgp": dgp_cfg})
    which = args.which.upper()
    if which not in ("PLOT", "CPLOT"):
        raise ConfigError("--which must be PLOT or CPLOT")
    t = dgp.tau if args.t is None else args.t
    if not 0 <= t <= dgp.tau:
        raise ConfigError(f"--t must be in 0..{dgp.tau}")
    value = true_estimand(dgp, which, t, args.n_oracle, seed=dgp.seed)
    out = {"estimand": which, "t": t, "value": value.value, "mc_se": value.mc_se,
           "n_pairs": value.n_pairs, "ratio": value.ratio}
    if value.analytic is not None:
        out.update(analytic=value.analytic, analytic_se=value.analytic_se)
    outdir = _outdir(args, cfg)
    stem = f"{args.stem}_{which}_t{t}"
    (outdir / f"{stem}.json").write_text(json.dumps(out, indent=2), encoding="utf-8")
    _write_manifest(outdir / f"{stem}_manifest.json", "true-estimand",
                    {"dgp": dgp.to_dict(), "which": which, "t": t, "n_oracle": args.n_oracle})
    print(json.dumps(out, indent=2))
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k:<26} {v}" for k, v in KEYS.items())
    epilog = ("Configuration is a TOML file of [dgp], [learner], [estimate], [experiment]\n"
              "and [output] tables.  Any key can be overridden with --set section.key=value.\n\n"
              "Keys:\n" + keys + "\n\nExit codes: 0 success, 2 configuration error, "
              "3 runtime or validation error.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key, e.g. dgp.n=500")
    common.add_argument("--out", help="output directory")
    common.add_argument("--stem", help="output file name stem")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")

    parser = argparse.ArgumentParser(prog="pairlot", description=__doc__.splitlines()[0],
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"pairlot {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("simulate", parents=[common], help="draw a trial dataset",
                       epilog=epilog, formatter_class=fmt)
    p.add_argument("--setting")
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--counterfactuals", action="store_true", help="also write the potential outcomes")
    p.set_defaults(func=cmd_simulate, default_stem="data")

    p = sub.add_parser("estimate", parents=[common], help="estimate effects on a CSV dataset",
                       epilog=epilog, formatter_class=fmt)
    p.add_argument("--data", required=True, help="trial-data CSV")
    p.add_argument("--methods", help="comma-separated method ids")
    p.add_argument("--t", type=int, help="horizon")
    p.set_defaults(func=cmd_estimate, default_stem="results")

    p = sub.add_parser("replicate", parents=[common], help="Monte Carlo replication of a table",
                       epilog=epilog, formatter_class=fmt)
    p.add_argument("--table", type=int, choices=[1, 2, 3, 4])
    p.add_argument("--setting")
    p.add_argument("--params", help="table 3: beta1,gamma0,gamma1, e.g. 1,1,0")
    p.add_argument("--R", type=int, help="replicates")
    p.add_argument("--methods", help="comma-separated method ids")
    p.add_argument("--workers", type=int)
    p.add_argument("--strict", action="store_true", help="exit 3 when a reference check fails")
    p.set_defaults(func=cmd_replicate, default_stem="metrics")

    p = sub.add_parser("t-table", parents=[common], help="per-arm distribution of T",
                       epilog=epilog, formatter_class=fmt)
    p.add_argument("--setting")
    p.add_argument("--n-large", type=int)
    p.set_defaults(func=cmd_t_table, default_stem="t_table")

    p = sub.add_parser("true-estimand", parents=[common], help="Monte Carlo value of an estimand",
                       epilog=epilog, formatter_class=fmt)
    p.add_argument("--setting")
    p.add_argument("--which", default="PLOT")
    p.add_argument("--t", type=int)
    p.add_argument("--n-oracle", type=int, default=1_000_000)
    p.set_defaults(func=cmd_true_estimand, default_stem="truth")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.stem is None:
        args.stem = args.default_stem
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        if getattr(args, "R", None) is not None and args.R < 1:
            raise ConfigError("--R must be >= 1")
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EstimationError, DataFormatError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
