"""Monte Carlo replication engine for the simulation tables.

A run draws R datasets from a DGP, fits nuisances once per replicate, applies
every requested method and aggregates Table-style metrics.  Replicate k uses
seeds derived from ``SeedSequence([master_seed, k])`` so results do not
depend on the number of worker processes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .comparators import ipcw, locf, sace, survivors_only
from .data import TrialDataset
from .dgp import DgpConfig, Setting, example_oracle_nuisance, generate, true_estimand
from .estimators import (EstimateResult, EstimationError, cplot, marginal_nuisance,
                         plot_adjusted, plot_unadj_fast, plot_unadj_pairwise,
                         ratio_estimand, wald_test)
from .learners import LearnerSpec
from .nuisance import corrupt, fit_nuisance, with_propensity

log = logging.getLogger(__name__)

METHODS = ("PLOT_unadj", "PLOT_pairwise", "PLOT_adj", "PLOT_adj_CF", "CPLOT", "CPLOT_CF",
           "PLOT_ratio_CF", "CPLOT_ratio_CF", "SACE", "IPCW", "SURVIVORS", "LOCF")
LABELS = {"PLOT_unadj": "PLOTunadj", "PLOT_pairwise": "PLOTunadj (pairs)", "PLOT_adj": "PLOTadj",
          "PLOT_adj_CF": "PLOTadj-CF", "CPLOT": "CPLOT", "CPLOT_CF": "CPLOT-CF",
          "PLOT_ratio_CF": "PLOT ratio-CF", "CPLOT_ratio_CF": "CPLOT ratio-CF", "SACE": "SACE",
          "IPCW": "IPCW", "SURVIVORS": "Survivors", "LOCF": "LOCF"}
NUISANCE_MODES = ("estimated", "oracle", "corrupted")
METRIC_FIELDS = ["method", "n_ok", "n_failed", "truth", "mean", "median", "sd", "robust_sd",
                 "rmse", "mean_se", "median_se", "coverage", "rejection", "se_flag"]


@dataclass
class ExperimentConfig:
    dgp: DgpConfig = field(default_factory=lambda: DgpConfig(Setting.SETTING1))
    replicates: int = 300
    methods: list = field(default_factory=lambda: ["PLOT_unadj", "PLOT_adj_CF", "CPLOT_CF"])
    t: int | None = None
    folds: int = 5
    n_boot: int = 500
    alpha: float = 0.05
    workers: int = 1
    seed: int = 20240601
    learner: LearnerSpec = field(default_factory=LearnerSpec)
    nuisance: str = "estimated"
    propensity: float | None = None
    truth: object = "zero"  # "zero", "oracle" or {method: value}
    n_oracle: int = 1_000_000

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ValueError(f"unknown method ids: {unknown}")
        if not self.methods:
            raise ValueError("at least one method is required")
        if self.nuisance not in NUISANCE_MODES:
            raise ValueError(f"nuisance must be one of {NUISANCE_MODES}")
        if self.nuisance == "oracle" and self.dgp.setting is not Setting.EXAMPLE:
            raise ValueError("oracle nuisances exist for the Example model only")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        if self.folds < 2:
            raise ValueError("cross-fitting needs folds >= 2")
        if self.workers < 1 or self.n_boot < 2:
            raise ValueError("workers must be >= 1 and n_boot >= 2")
        if self.propensity is not None and not 0 < self.propensity < 1:
            raise ValueError("propensity override must be in (0, 1)")
        if isinstance(self.truth, str) and self.truth not in ("zero", "oracle"):
            raise ValueError("truth must be 'zero', 'oracle' or a mapping")

    @property
    def horizon(self) -> int:
        return self.dgp.tau if self.t is None else int(self.t)

    def to_dict(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k not in ("dgp", "learner")}
        out["dgp"] = self.dgp.to_dict()
        out["learner"] = asdict(self.learner)
        return out


def replicate_seeds(master: int, k: int) -> dict[str, int]:
    """Independent 63-bit seeds for the data, folds and bootstrap of replicate k."""
    state = np.random.SeedSequence([int(master), int(k)]).generate_state(3, np.uint64)
    return {name: int(v >> np.uint64(1)) for name, v in zip(("data", "folds", "boot"), state)}


# ---------------------------------------------------------------- replicates

@dataclass
class ReplicateOutcome:
    index: int
    estimates: dict  # method -> (point, se, ci_lo, ci_hi, p_value)
    failures: dict  # method -> message
    if_center: float = 0.0  # max |mean of centered IF| over IF-based methods
    fit_problems: list = field(default_factory=list)


def _p_value(result: EstimateResult, null: float) -> float:
    if "p_value" in result.extra and null == 0.0:
        return float(result.extra["p_value"])
    return wald_test(result, null)[1]


class _Fits:
    """Lazily fitted nuisances for one replicate."""

    def __init__(self, config: ExperimentConfig, dataset: TrialDataset, seed: int):
        self.config, self.dataset, self.seed = config, dataset, seed
        self.cache = {}
        self.problems: list[str] = []

    def get(self, cross_fit: bool):
        key = "cf" if cross_fit else "full"
        if key not in self.cache:
            cfg, data = self.config, self.dataset
            if cfg.nuisance == "oracle":
                fit = example_oracle_nuisance(cfg.dgp, data)
            elif cfg.nuisance == "corrupted":
                fit = corrupt(marginal_nuisance(data), "constant")
            else:
                fit = fit_nuisance(data, cfg.learner, cfg.folds if cross_fit else 1, self.seed)
            if cfg.propensity is not None:
                fit = with_propensity(fit, cfg.propensity)
            self.problems += [f"{key}: {p}" for p in fit.check()]
            self.cache[key] = fit
        return self.cache[key]


def _apply(method: str, dataset: TrialDataset, fits: _Fits, config: ExperimentConfig,
           boot_seed: int) -> EstimateResult:
    t, alpha = config.horizon, config.alpha
    if method == "PLOT_unadj":
        return plot_unadj_fast(dataset, t, alpha)
    if method == "PLOT_pairwise":
        return plot_unadj_pairwise(dataset, t, config.n_boot, boot_seed, alpha)
    if method in ("PLOT_adj", "PLOT_adj_CF"):
        return plot_adjusted(dataset, fits.get(method.endswith("CF")), t, alpha=alpha)
    if method in ("CPLOT", "CPLOT_CF"):
        return cplot(dataset, fits.get(method.endswith("CF")), t, alpha=alpha)
    if method in ("PLOT_ratio_CF", "CPLOT_ratio_CF"):
        return ratio_estimand(dataset, fits.get(True), t, method.split("_")[0], alpha=alpha)
    if method == "SACE":
        return sace(dataset, n_boot=config.n_boot, seed=boot_seed, alpha=alpha)
    if method == "IPCW":
        return ipcw(dataset, alpha=alpha)
    if method == "SURVIVORS":
        return survivors_only(dataset, alpha)
    if method == "LOCF":
        return locf(dataset, alpha)
    raise ValueError(f"unknown method {method!r}")


def null_value(method: str) -> float:
    return 1.0 if "ratio" in method else 0.0


def run_replicate(config: ExperimentConfig, k: int, dataset: TrialDataset | None = None
                  ) -> ReplicateOutcome:
    """Replicate k alone; bit-identical to its row in a full run."""
    seeds = replicate_seeds(config.seed, k)
    if dataset is None:
        dataset, _ = generate(config.dgp, seed=seeds["data"])
    fits = _Fits(config, dataset, seeds["folds"])
    estimates, failures = {}, {}
    center = 0.0
    for method in config.methods:
        try:
            res = _apply(method, dataset, fits, config, seeds["boot"])
        except (EstimationError, np.linalg.LinAlgError, ValueError) as exc:
            failures[method] = f"{type(exc).__name__}: {exc}"
            continue
        null = null_value(method)
        try:
            pval = _p_value(res, null)
        except EstimationError:
            pval = float("nan")
        estimates[method] = (res.point, res.se, res.ci[0], res.ci[1], pval)
        if res.if_contributions.size:
            center = max(center, abs(float(res.centered_if().mean())))
    return ReplicateOutcome(k, estimates, failures, center, fits.problems)


def _task(args):
    config, k, dataset = args
    return run_replicate(config, k, dataset)


# ------------------------------------------------------------------ metrics

@dataclass
class MetricsRow:
    method: str
    n_ok: int
    n_failed: int
    truth: float
    mean: float
    median: float
    sd: float
    robust_sd: float
    rmse: float
    mean_se: float
    median_se: float
    coverage: float
    rejection: float
    se_flag: bool = False

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_FIELDS}


def robust_sd(x: np.ndarray) -> float:
    """Median absolute deviation scaled to the normal SD."""
    x = np.asarray(x, float)
    return float(1.4826 * np.median(np.abs(x - np.median(x)))) if x.size else float("nan")


def metrics_row(method: str, points, ses, lo, hi, pvals, truth: float, alpha: float,
                n_failed: int = 0) -> MetricsRow:
    points, ses = np.asarray(points, float), np.asarray(ses, float)
    n = points.size
    if n == 0:
        nan = float("nan")
        return MetricsRow(method, 0, n_failed, truth, nan, nan, nan, nan, nan, nan, nan, nan, nan)
    covered = (np.asarray(lo) <= truth) & (truth <= np.asarray(hi))
    pv = np.asarray(pvals, float)
    mean_se = float(ses.mean())
    median_se = float(np.median(ses))
    flag = bool(mean_se > 0 and median_se / mean_se < 1e-3)
    return MetricsRow(
        method=method, n_ok=n, n_failed=n_failed, truth=float(truth),
        mean=float(points.mean()), median=float(np.median(points)),
        sd=float(points.std(ddof=1)) if n > 1 else float("nan"),
        robust_sd=robust_sd(points),
        rmse=float(np.sqrt(np.mean((points - truth) ** 2))),
        mean_se=mean_se, median_se=median_se,
        coverage=float(covered.mean()),
        rejection=float(np.mean(pv < alpha)),
        se_flag=flag,
    )


class StreamingMetrics:
    """One-pass (Welford) accumulator for the moment-based metrics."""

    def __init__(self, truth: float, alpha: float):
        self.truth, self.alpha = truth, alpha
        self.n = 0
        self._mean = 0.0
        self._m2 = 0.0
        self._se_sum = 0.0
        self._sq_err = 0.0
        self._covered = 0
        self._rejected = 0

    def update(self, point, se, lo, hi, pval):
        self.n += 1
        delta = point - self._mean
        self._mean += delta / self.n
        self._m2 += delta * (point - self._mean)
        self._se_sum += se
        self._sq_err += (point - self.truth) ** 2
        self._covered += int(lo <= self.truth <= hi)
        self._rejected += int(pval < self.alpha)

    def result(self) -> dict:
        n = self.n
        return {"n_ok": n, "mean": self._mean,
                "sd": math.sqrt(self._m2 / (n - 1)) if n > 1 else float("nan"),
                "rmse": math.sqrt(self._sq_err / n), "mean_se": self._se_sum / n,
                "coverage": self._covered / n, "rejection": self._rejected / n}


# -------------------------------------------------------------- experiments

@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    replicates: list  # ReplicateOutcome, ordered by index
    truth: dict

    def row(self, method: str) -> MetricsRow:
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    @property
    def failures(self) -> dict:
        out = {m: [] for m in self.config.methods}
        for rep in self.replicates:
            for m, msg in rep.failures.items():
                out[m].append((rep.index, msg))
        return out

    def estimates(self, method: str) -> np.ndarray:
        """(R_ok, 5) array of point, se, ci_lo, ci_hi, p_value."""
        vals = [rep.estimates[method] for rep in self.replicates if method in rep.estimates]
        return np.asarray(vals, float).reshape(-1, 5)


def resolve_truth(config: ExperimentConfig) -> dict[str, float]:
    """Coverage target per method.

    "zero" tests the null (0 for contrasts, 1 for ratios); "oracle" evaluates
    the estimands by Monte Carlo on counterfactual pairs.
    """
    truth = {m: null_value(m) for m in config.methods}
    if isinstance(config.truth, dict):
        truth.update({k: float(v) for k, v in config.truth.items()})
    elif config.truth == "oracle":
        t = config.horizon
        oracle = {w: true_estimand(config.dgp, w, t, config.n_oracle, seed=config.seed)
                  for w in ("PLOT", "CPLOT")}
        for m in config.methods:
            which = "CPLOT" if m.startswith("CPLOT") else "PLOT"
            truth[m] = oracle[which].ratio if "ratio" in m else oracle[which].value
    return truth


def run_experiment(config: ExperimentConfig, datasets: list[TrialDataset] | None = None,
                   progress=None) -> ExperimentResult:
    """Run all replicates and aggregate one MetricsRow per method.

    ``datasets`` injects fixed data (replicate k uses ``datasets[k]``) in
    place of DGP draws.  Replicates where a method raises are excluded from
    that method's row and counted in ``n_failed``.
    """
    R = config.replicates if datasets is None else len(datasets)
    if R < 1:
        raise ValueError("replicates must be >= 1")
    tasks = [(config, k, None if datasets is None else datasets[k]) for k in range(R)]
    if config.workers == 1 or R == 1:
        outcomes = []
        for task in tasks:
            outcomes.append(_task(task))
            if progress:
                progress(len(outcomes), R)
    else:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(_task, tasks, chunksize=max(1, R // (4 * config.workers))))
    outcomes.sort(key=lambda o: o.index)
    truth = resolve_truth(config)
    rows = []
    for m in config.methods:
        vals = [o.estimates[m] for o in outcomes if m in o.estimates]
        arr = np.asarray(vals, float).reshape(-1, 5)
        n_failed = sum(m in o.failures for o in outcomes)
        if n_failed:
            log.warning("%s failed on %d of %d replicates", m, n_failed, R)
        rows.append(metrics_row(m, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4],
                                truth[m], config.alpha, n_failed))
    return ExperimentResult(config, rows, outcomes, truth)


# ------------------------------------------------------------------ outputs

def _num(x) -> str:
    if isinstance(x, bool):
        return str(x).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def metrics_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in rows:
        writer.writerow([r.method] + [_num(getattr(r, k)) for k in METRIC_FIELDS[1:]])
    return buf.getvalue()


def metrics_markdown(rows: list[MetricsRow], title: str = "") -> str:
    """Markdown table with columns Estimate (median), SD (robust), SE (median), Cov."""
    lines = [f"### {title}", ""] if title else []
    lines += ["| Method | Estimate | SD | SE | Cov | Failed |",
              "|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {LABELS.get(r.method, r.method)} | {r.mean:.3f} ({r.median:.3f}) | "
                     f"{r.sd:.3f} ({r.robust_sd:.3f}) | {r.mean_se:.3f} ({r.median_se:.3f}) | "
                     f"{100 * r.coverage:.1f} | {r.n_failed} |")
    return "\n".join(lines) + "\n"


def replicates_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["replicate", "method", "point", "se", "ci_lo", "ci_hi", "p_value", "error"])
    for rep in result.replicates:
        for m in result.config.methods:
            if m in rep.estimates:
                writer.writerow([rep.index, m] + [_num(v) for v in rep.estimates[m]] + [""])
            else:
                writer.writerow([rep.index, m, "", "", "", "", "", rep.failures.get(m, "")])
    return buf.getvalue()


def manifest(config: ExperimentConfig, extra: dict | None = None) -> dict:
    import scipy
    import sklearn

    out = {"package": "pairlot", "version": __version__, "config": config.to_dict(),
           "seed_derivation": "SeedSequence([master_seed, replicate]).generate_state(3, uint64) >> 1 "
                              "-> (data, folds, bootstrap)",
           "versions": {"python": platform.python_version(), "numpy": np.__version__,
                        "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}}
    out.update(extra or {})
    return out


def write_outputs(result: ExperimentResult, outdir, stem: str = "metrics", title: str = "") -> dict:
    """Metrics CSV and markdown, per-replicate CSV and a JSON manifest."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {"csv": outdir / f"{stem}.csv", "markdown": outdir / f"{stem}.md",
             "replicates": outdir / f"{stem}_replicates.csv",
             "manifest": outdir / f"{stem}_manifest.json"}
    paths["csv"].write_text(metrics_csv(result.rows), encoding="utf-8")
    paths["markdown"].write_text(metrics_markdown(result.rows, title), encoding="utf-8")
    paths["replicates"].write_text(replicates_csv(result), encoding="utf-8")
    failures = {m: len(v) for m, v in result.failures.items()}
    info = manifest(result.config, {"truth": result.truth, "failures": failures,
                                    "outputs": {k: str(v.name) for k, v in paths.items()}})
    paths["manifest"].write_text(json.dumps(info, indent=2, sort_keys=True), encoding="utf-8")
    return paths


# --------------------------------------------------------- reference tables

def load_reference() -> dict:
    """Shipped reference values and acceptance intervals for Tables 1-4."""
    text = resources.files("pairlot").joinpath("reference.json").read_text(encoding="utf-8")
    return json.loads(text)


@dataclass
class CellCheck:
    method: str
    metric: str
    value: float
    lo: float | None
    hi: float | None
    published: float | None
    passed: bool


@dataclass
class ComparisonReport:
    cells: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.cells)

    def to_markdown(self) -> str:
        lines = ["| Method | Metric | Value | Interval | Published | Result |", "|---|---|---|---|---|---|"]
        for c in self.cells:
            lo = "-inf" if c.lo is None else f"{c.lo:g}"
            hi = "inf" if c.hi is None else f"{c.hi:g}"
            published = "" if c.published is None else f"{c.published:g}"
            lines.append(f"| {LABELS.get(c.method, c.method)} | {c.metric} | {c.value:.4g} | "
                         f"[{lo}, {hi}] | {published} | {'pass' if c.passed else 'FAIL'} |")
        return "\n".join(lines) + "\n"


def _metric_value(row: MetricsRow, metric: str) -> float:
    if metric == "coverage":
        return 100.0 * row.coverage
    if metric == "abs_mean":
        return abs(row.mean)
    return float(getattr(row, metric))


def compare_to_reference(table: list[MetricsRow] | ExperimentResult, reference: dict,
                         tolerances: list | None = None) -> ComparisonReport:
    """Check metrics against reference intervals.

    ``reference`` is one entry of :func:`load_reference` (it carries
    ``published`` values and ``checks``); ``tolerances`` optionally replaces the
    checks.  Each check is ``{"method", "metric", "lo", "hi"}`` where metric
    is a MetricsRow field, ``coverage`` (percent) or ``abs_mean``.
    """
    rows = table.rows if isinstance(table, ExperimentResult) else table
    checks = reference.get("checks", []) if tolerances is None else tolerances
    if not checks:
        raise ValueError("empty tolerance specification")
    by_method = {r.method: r for r in rows}
    published = reference.get("published", {})
    cells = []
    for chk in checks:
        lo, hi = chk.get("lo"), chk.get("hi")
        if lo is None and hi is None:
            raise ValueError(f"empty tolerance for {chk.get('method')}/{chk.get('metric')}")
        method, metric = chk["method"], chk["metric"]
        if method not in by_method:
            raise KeyError(f"missing method row {method!r}")
        value = _metric_value(by_method[method], metric)
        ok = math.isfinite(value) and (lo is None or value >= lo) and (hi is None or value <= hi)
        ref = published.get(method, {}).get("coverage" if metric == "coverage" else metric)
        cells.append(CellCheck(method, metric, value, lo, hi, ref, bool(ok)))
    return ComparisonReport(cells)


def compare_t_table(table: np.ndarray, reference: np.ndarray, tolerance: float = 1.5
                    ) -> ComparisonReport:
    """Cell-wise check of a (tau+1) x 2 percentage table."""
    if tolerance is None or tolerance <= 0:
        raise ValueError("empty tolerance specification")
    table, reference = np.asarray(table, float), np.asarray(reference, float)
    if table.shape != reference.shape:
        raise ValueError("table shapes differ")
    cells = []
    for t in range(table.shape[0]):
        for a in range(2):
            ref = float(reference[t, a])
            cells.append(CellCheck(f"T={t}", f"A={a}", float(table[t, a]), ref - tolerance,
                                   ref + tolerance, ref, abs(table[t, a] - ref) <= tolerance))
    return ComparisonReport(cells)
