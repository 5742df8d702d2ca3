"""Baseline estimators that ignore or reweight around the intercurrent event.

These target different estimands from PLOT (survivor contrasts, hypothetical
no-ICE effects, last-value contrasts) and serve as comparators in the
simulation tables.  All return ``EstimateResult`` rows with an empty
influence-function vector.
"""
from __future__ import annotations

import logging
import math

import numpy as np
from scipy import stats
from scipy.special import expit

from .data import TrialDataset
from .estimators import EstimateResult, EstimationError, normal_quantile
from .learners import fit_logistic, ridge_solve

log = logging.getLogger(__name__)

ComparatorResult = EstimateResult
COMPARATORS = ("SACE", "IPCW", "LOCF", "SURVIVORS")
WEIGHT_FLOOR = 0.02


def _welch(y1: np.ndarray, y0: np.ndarray, estimand_id: str, t: int, alpha: float) -> EstimateResult:
    if y1.size < 2 or y0.size < 2:
        raise EstimationError(f"{estimand_id}: need at least two subjects per arm")
    v1, v0 = y1.var(ddof=1) / y1.size, y0.var(ddof=1) / y0.size
    point = float(y1.mean() - y0.mean())
    se = math.sqrt(v1 + v0)
    if se > 0:
        df = (v1 + v0) ** 2 / (v1 ** 2 / (y1.size - 1) + v0 ** 2 / (y0.size - 1))
        q = float(stats.t.ppf(1 - alpha / 2, df))
        tstat = point / se
        pval = float(2 * stats.t.sf(abs(tstat), df))
    else:
        df, q, tstat, pval = float("nan"), 0.0, float("nan"), float("nan")
    return EstimateResult(estimand_id, t, point, se, (point - q * se, point + q * se),
                          np.empty(0), y1.size + y0.size, "welch", alpha,
                          {"t_stat": tstat, "df": df, "p_value": pval})


def locf(dataset: TrialDataset, alpha: float = 0.05) -> EstimateResult:
    """Difference in last observed outcomes, Y_i(T_i), by Welch t-test."""
    last = dataset.last_observed()
    A = dataset.arm
    return _welch(last[A == 1], last[A == 0], "LOCF", dataset.tau, alpha)


def survivors_only(dataset: TrialDataset, alpha: float = 0.05) -> EstimateResult:
    """Difference in Y(tau) among subjects without an ICE before tau."""
    tau = dataset.tau
    alive = dataset.ice_time == tau
    y = dataset.outcomes[:, tau]
    A = dataset.arm
    for a in (0, 1):
        if not np.any(alive & (A == a)):
            raise EstimationError(f"SURVIVORS: no survivors in arm {a}")
    return _welch(y[alive & (A == 1)], y[alive & (A == 0)], "SURVIVORS", tau, alpha)


# -------------------------------------------------------------- survival models

def _survival_design(dataset: TrialDataset) -> np.ndarray:
    """Baseline covariates plus the baseline outcome, constant columns dropped."""
    X = np.column_stack([dataset.covariates, dataset.outcomes[:, 0]])
    return X[:, X.std(axis=0) > 1e-12]


class _ArmSurvivalModel:
    """Main-effects logistic model of I(T = tau) given (L, Y(0)) within one arm."""

    def __init__(self, X: np.ndarray, alive: np.ndarray, context: str):
        self.center = X.mean(axis=0)
        self.scale = np.where(X.std(axis=0) > 1e-12, X.std(axis=0), 1.0)
        Z = (X - self.center) / self.scale
        if alive.min() == alive.max():
            self.b0, self.beta = None, np.zeros(X.shape[1])
            self.constant = float(alive[0])
        else:
            self.constant = None
            self.b0, self.beta = fit_logistic(Z, alive.astype(float), context=context)

    def predict(self, X: np.ndarray) -> np.ndarray:
        if self.constant is not None:
            return np.full(X.shape[0], self.constant)
        return expit(self.b0 + ((X - self.center) / self.scale) @ self.beta)


def _arm_models(dataset: TrialDataset, X: np.ndarray, context: str):
    alive = dataset.ice_time == dataset.tau
    models = {}
    for a in (0, 1):
        rows = dataset.arm == a
        if not rows.any():
            raise EstimationError(f"{context}: arm {a} is empty")
        models[a] = _ArmSurvivalModel(X[rows], alive[rows], f"{context} survival model, arm {a}")
    return models, alive


# ------------------------------------------------------------------------ SACE

def _sace_point(dataset: TrialDataset) -> float:
    X = _survival_design(dataset)
    models, alive = _arm_models(dataset, X, "SACE")
    y = dataset.outcomes[:, dataset.tau]
    means = {}
    for a in (0, 1):
        rows = alive & (dataset.arm == a)
        if not rows.any():
            raise EstimationError(f"SACE: no survivors in arm {a}")
        # survivors in arm a weighted by their chance of surviving under the other arm
        w = models[1 - a].predict(X[rows])
        if w.sum() <= 0:
            raise EstimationError(f"SACE: zero total weight in arm {a}")
        means[a] = float(w @ y[rows] / w.sum())
    return means[1] - means[0]


def sace(dataset: TrialDataset, t: int | None = None, n_boot: int = 500, seed=0,
         alpha: float = 0.05) -> EstimateResult:
    """Weighted survivor contrast for the always-survivor stratum, bootstrap SE.

    Bootstrap resamples that lose all survivors of an arm are redrawn.
    """
    tau = dataset.tau
    if t is not None and int(t) != tau:
        raise EstimationError("SACE is defined at the end of follow-up only")
    point = _sace_point(dataset)
    rng = np.random.default_rng(seed)
    boots, attempts = [], 0
    while len(boots) < n_boot and attempts < 10 * n_boot:
        attempts += 1
        idx = rng.integers(0, dataset.n, dataset.n)
        try:
            boots.append(_sace_point(dataset.subset(idx)))
        except EstimationError:
            continue
    boots = np.asarray(boots)
    se = float(boots.std(ddof=1)) if boots.size > 1 else float("nan")
    z = normal_quantile(1 - alpha / 2)
    extra = {"bootstrap": boots}
    if boots.size > 1:
        extra["percentile_ci"] = tuple(np.quantile(boots, [alpha / 2, 1 - alpha / 2]).tolist())
    return EstimateResult("SACE", tau, point, se, (point - z * se, point + z * se), np.empty(0),
                          int((dataset.ice_time == tau).sum()), f"hayden;bootstrap={n_boot}",
                          alpha, extra)


# ------------------------------------------------------------------------ IPCW

def _weighted_logistic(X, y, w):
    """Weighted logistic fit returning (coef incl. intercept, bread, residual scores)."""
    Z = (X - X.mean(axis=0)) / X.std(axis=0)
    b0, beta = fit_logistic(Z, y, weights=w, context="IPCW outcome model")
    # map back to the original scale
    beta_raw = beta / X.std(axis=0)
    theta = np.concatenate([[b0 - X.mean(axis=0) @ beta_raw], beta_raw])
    D = np.column_stack([np.ones(len(y)), X])
    mu = expit(D @ theta)
    bread = (D * (w * mu * (1 - mu))[:, None]).T @ D
    return theta, D, bread, y - mu


def ipcw(dataset: TrialDataset, t: int | None = None, alpha: float = 0.05,
         weight_floor: float = WEIGHT_FLOOR, link: str = "identity") -> EstimateResult:
    """Treatment coefficient among survivors, inverse-weighted by survival probability.

    ``link="identity"`` fits weighted least squares for every outcome type
    (a risk difference for binary Y); ``link="logit"`` fits a weighted
    logistic model to binary outcomes and returns a log odds ratio.  The
    sandwich SE treats the weights as known.
    """
    if link not in ("identity", "logit"):
        raise ValueError(f"unknown link {link!r}")
    tau = dataset.tau
    if t is not None and int(t) != tau:
        raise EstimationError("IPCW is defined at the end of follow-up only")
    Xs = _survival_design(dataset)
    models, alive = _arm_models(dataset, Xs, "IPCW")
    A = dataset.arm
    prob = np.where(A == 1, models[1].predict(Xs), models[0].predict(Xs))
    rows = np.flatnonzero(alive)
    for a in (0, 1):
        if not np.any(A[rows] == a):
            raise EstimationError(f"IPCW: no survivors in arm {a}")
    truncated = prob[rows] < weight_floor
    if truncated.mean() > 0.5:
        log.warning("IPCW: weight truncation applied to %.0f%% of survivors", 100 * truncated.mean())
    w = 1.0 / np.maximum(prob[rows], weight_floor)
    X = np.column_stack([A[rows], dataset.covariates[rows], dataset.outcomes[rows, 0]]).astype(float)
    keep = np.r_[True, X[:, 1:].std(axis=0) > 1e-12]
    X = X[:, keep]
    y = dataset.outcomes[rows, tau]
    binary = bool(np.all(np.isin(y, (0.0, 1.0))))
    if binary and link == "logit":
        if y.min() == y.max():
            raise EstimationError("IPCW: outcome constant among survivors")
        theta, D, bread, resid = _weighted_logistic(X, y, w)
        method = "ipcw;logistic;hc0"
    else:
        b0, beta = ridge_solve(X, y, 0.0, weights=w)
        theta = np.concatenate([[b0], beta])
        D = np.column_stack([np.ones(len(y)), X])
        bread = (D * w[:, None]).T @ D
        resid = y - D @ theta
        method = "ipcw;linear;hc0"
    scores = D * (w * resid)[:, None]
    meat = scores.T @ scores
    inv = np.linalg.pinv(bread)
    cov = inv @ meat @ inv
    point = float(theta[1])
    se = float(math.sqrt(max(cov[1, 1], 0.0)))
    z = normal_quantile(1 - alpha / 2)
    return EstimateResult("IPCW", tau, point, se, (point - z * se, point + z * se), np.empty(0),
                          int(rows.size), method, alpha,
                          {"truncated_fraction": float(truncated.mean())})
