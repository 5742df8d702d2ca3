"""Figures for replication runs, rendered to files with the Agg backend."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import LABELS, ExperimentResult  # noqa: E402


def estimate_boxplot(result: ExperimentResult, path, title: str = "") -> Path:
    """Sampling distribution of each method's estimates, with its coverage target."""
    methods = [m for m in result.config.methods if result.estimates(m).shape[0]]
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(methods) + 2), 4))
    data = [result.estimates(m)[:, 0] for m in methods]
    ax.boxplot(data, showfliers=True)
    ax.set_xticks(range(1, len(methods) + 1))
    ax.set_xticklabels([LABELS.get(m, m) for m in methods], rotation=30, ha="right")
    for j, m in enumerate(methods, start=1):
        ax.hlines(result.truth[m], j - 0.4, j + 0.4, colors="tab:red", linestyles="dashed")
    ax.set_ylabel("estimate")
    ax.set_title(title or f"Estimates over {len(result.replicates)} replicates")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def coverage_bars(result: ExperimentResult, path, title: str = "") -> Path:
    rows = [r for r in result.rows if r.n_ok]
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(rows) + 2), 4))
    x = np.arange(len(rows))
    cov = [100 * r.coverage for r in rows]
    ax.bar(x, cov, color="tab:blue")
    nominal = 100 * (1 - result.config.alpha)
    ax.axhline(nominal, color="tab:red", linestyle="dashed", label=f"nominal {nominal:.0f}%")
    # binomial MC band around the nominal level
    R = max(r.n_ok for r in rows)
    band = 196 * np.sqrt((1 - result.config.alpha) * result.config.alpha / R)
    ax.axhspan(nominal - band, nominal + band, color="tab:red", alpha=0.1)
    ax.set_xticks(x)
    ax.set_xticklabels([LABELS.get(r.method, r.method) for r in rows], rotation=30, ha="right")
    ax.set_ylim(0, 100)
    ax.set_ylabel("CI coverage (%)")
    ax.legend(loc="lower left")
    ax.set_title(title or "Coverage")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def t_distribution_bars(table: np.ndarray, path, reference=None, title: str = "") -> Path:
    """Grouped bars of P(T = t | A = a) in percent, reference values as markers."""
    table = np.asarray(table, float)
    t = np.arange(table.shape[0])
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.38
    for a, color in ((0, "tab:gray"), (1, "tab:blue")):
        ax.bar(t + (a - 0.5) * width, table[:, a], width, color=color, label=f"A={a}")
        if reference is not None:
            ax.plot(t + (a - 0.5) * width, np.asarray(reference, float)[:, a], "k_",
                    markersize=14, label="reference" if a == 1 else None)
    ax.set_xticks(t)
    ax.set_xlabel("T")
    ax.set_ylabel("percent")
    ax.legend()
    ax.set_title(title or "Distribution of T")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_experiment(result: ExperimentResult, outdir, stem: str = "metrics",
                      title: str = "") -> dict:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    return {"estimates_png": estimate_boxplot(result, outdir / f"{stem}_estimates.png", title),
            "coverage_png": coverage_bars(result, outdir / f"{stem}_coverage.png", title)}
