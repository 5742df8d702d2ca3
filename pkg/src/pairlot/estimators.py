"""PLOT and CPLOT estimators with influence-function standard errors.

Notation used below, for arm ``a``, visit ``s`` and conditioning index
``u in {s-1, s}``:

* ``phi_eta[a, u]``      uncentered influence function of P(T > u | A=a)
* ``phi_gamma[a, s, u]`` uncentered influence function of E{Y(s) I(T > u) | A=a}
* ``eta``/``gamma``      their sample means (AIPW estimates)

The PLOT contrast at horizon t is
``sum_s eta0[s-1] gamma1[s,s-1] - eta1[s-1] gamma0[s,s-1]
 - I(t > s) {eta0[s] gamma1[s,s] - eta1[s] gamma0[s,s]}``.

Every estimator stores per-subject ``if_contributions`` equal to the estimate
plus the estimated centered influence function, so their mean is the point
estimate and ``sd / sqrt(n)`` is the standard error.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import TrialDataset
from .nuisance import NuisanceFit, fit_nuisance
from .learners import LearnerSpec

ESTIMANDS = ("PLOT_unadj", "PLOT_adj", "CPLOT", "PLOT_ratio", "CPLOT_ratio")
RESULT_FIELDS = ["estimand_id", "t", "point", "se", "ci_lo", "ci_hi", "n_used", "method"]
DENOMINATOR_FLOOR = 1e-6


class EstimationError(ValueError):
    """Raised when an estimator cannot produce a valid result."""


def normal_quantile(p: float) -> float:
    return float(norm.ppf(p))


@dataclass
class EstimateResult:
    estimand_id: str
    t: int
    point: float
    se: float
    ci: tuple[float, float]
    if_contributions: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    n_used: int = 0
    method: str = ""
    alpha: float = 0.05
    extra: dict = field(default_factory=dict, repr=False)

    def centered_if(self) -> np.ndarray:
        return self.if_contributions - self.point

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]

    def to_row(self) -> dict:
        return {"estimand_id": self.estimand_id, "t": self.t, "point": repr(self.point),
                "se": repr(self.se), "ci_lo": repr(self.ci[0]), "ci_hi": repr(self.ci[1]),
                "n_used": self.n_used, "method": self.method}


def _result(estimand_id, t, point, contributions, alpha, method, n_used=None, extra=None):
    contributions = np.asarray(contributions, float)
    n = contributions.size
    se = float(np.std(contributions, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")
    z = normal_quantile(1 - alpha / 2)
    point = float(point)
    if not (math.isfinite(point) and math.isfinite(se)):
        raise EstimationError(f"{estimand_id}: non-finite estimate")
    return EstimateResult(estimand_id, int(t), point, se, (point - z * se, point + z * se),
                          contributions, n if n_used is None else n_used, method, alpha,
                          extra or {})


def _check_horizon(dataset: TrialDataset, t: int) -> int:
    t = int(t)
    if not 0 <= t <= dataset.tau:
        raise EstimationError(f"horizon t={t} outside 0..{dataset.tau}")
    if set(np.unique(dataset.arm).tolist()) != {0, 1}:
        raise EstimationError("both arms must be non-empty")
    return t


# -------------------------------------------------------------- pairwise (O(n^2))

def _pairwise_point(Y, T, A, t) -> float:
    treated = np.flatnonzero(A == 1)
    control = np.flatnonzero(A == 0)
    m = np.minimum(np.minimum(T[treated][:, None], T[control][None, :]), t)
    total = 0.0
    for s in range(t + 1):
        hit = m == s
        if not hit.any():
            continue
        diff = Y[treated, s][:, None] - Y[control, s][None, :]
        total += np.sum(diff[hit])
    return total / (treated.size * control.size)


def plot_unadj_pairwise(dataset: TrialDataset, t: int | None = None, n_boot: int = 500,
                        seed=0, alpha: float = 0.05) -> EstimateResult:
    """All-pairs estimator of the PLOT contrast with a subject-level bootstrap SE.

    Quadratic in n; kept as the reference implementation for the linear-time
    estimator.  ``extra['percentile_ci']`` holds the bootstrap percentile interval.
    """
    t = _check_horizon(dataset, dataset.tau if t is None else t)
    Y, T, A = dataset.filled_outcomes(), dataset.ice_time, dataset.arm
    point = _pairwise_point(Y, T, A, t)
    rng = np.random.default_rng(seed)
    boots = []
    n = dataset.n
    while len(boots) < n_boot:
        idx = rng.integers(0, n, n)
        if A[idx].min() == A[idx].max():
            continue
        boots.append(_pairwise_point(Y[idx], T[idx], A[idx], t))
    boots = np.asarray(boots)
    se = float(boots.std(ddof=1)) if n_boot > 1 else float("nan")
    z = normal_quantile(1 - alpha / 2)
    extra = {"percentile_ci": tuple(np.quantile(boots, [alpha / 2, 1 - alpha / 2]).tolist()),
             "bootstrap": boots}
    return EstimateResult("PLOT_unadj", t, point, se, (point - z * se, point + z * se),
                          np.empty(0), n, f"pairwise;bootstrap={n_boot}", alpha, extra)


# ------------------------------------------------------------ influence kernel

class _Pieces:
    """Uncentered influence functions of the survival and outcome functionals."""

    def __init__(self, dataset: TrialDataset, fit: NuisanceFit, t: int, pi1):
        if fit.n != dataset.n or fit.tau != dataset.tau:
            raise EstimationError("nuisance fit does not match dataset")
        self.A = dataset.arm.astype(float)
        self.T = dataset.ice_time
        self.Y = dataset.filled_outcomes()
        self.fit = fit
        pi1 = np.broadcast_to(np.asarray(pi1, float), (dataset.n,))
        self.weight = {1: self.A / pi1, 0: (1 - self.A) / (1 - pi1)}
        self.t = t
        self._cache = {}
        if not (np.all(np.isfinite(fit.p_hat[:, :, :t + 2]))
                and np.all(np.isfinite(fit.mu_hat[:, :, :t + 1]))):
            raise EstimationError("non-finite nuisance prediction")

    def risk(self, u):
        return (self.T > u).astype(float)

    def phi_eta(self, a, u):
        key = ("eta", a, u)
        if key not in self._cache:
            p = self.fit.p(a, u)
            self._cache[key] = p + self.weight[a] * (self.risk(u) - p)
        return self._cache[key]

    def phi_gamma(self, a, s, u):
        key = ("gamma", a, s, u)
        if key not in self._cache:
            pm = self.fit.p(a, u) * self.fit.mu(a, s, u)
            self._cache[key] = pm + self.weight[a] * (self.Y[:, s] * self.risk(u) - pm)
        return self._cache[key]

    def terms(self):
        """Yield (sign, s, u) over the PLOT sum; u = s only when t > s."""
        for s in range(self.t + 1):
            yield 1.0, s, s - 1
            if self.t > s:
                yield -1.0, s, s


def _propensity(fit: NuisanceFit, variant: str):
    if variant == "semiparametric":
        pi = np.asarray(fit.pi_hat, float)
        return float(pi) if pi.ndim == 0 else float(pi.mean())
    if variant == "nonparametric":
        return fit.pi_hat
    raise EstimationError(f"unknown variant {variant!r}")


def _plot_arm_parts(pieces: _Pieces):
    """Per-subject contributions to the treated and control halves of the contrast.

    Returns (num_i, den_i) whose means are
    sum_s +/- eta0 gamma1 and sum_s +/- eta1 gamma0 respectively.
    """
    n = pieces.A.size
    num = np.zeros(n)
    den = np.zeros(n)
    for sign, s, u in pieces.terms():
        pe0, pe1 = pieces.phi_eta(0, u), pieces.phi_eta(1, u)
        pg0, pg1 = pieces.phi_gamma(0, s, u), pieces.phi_gamma(1, s, u)
        e0, e1, g0, g1 = pe0.mean(), pe1.mean(), pg0.mean(), pg1.mean()
        num += sign * (pe0 * g1 + e0 * pg1 - e0 * g1)
        den += sign * (pe1 * g0 + e1 * pg0 - e1 * g0)
    return num, den


def plot_adjusted(dataset: TrialDataset, fit: NuisanceFit, t: int | None = None,
                  variant: str = "semiparametric", alpha: float = 0.05,
                  estimand_id: str = "PLOT_adj") -> EstimateResult:
    """Debiased (cross-fitted) estimator of the PLOT additive contrast."""
    t = _check_horizon(dataset, dataset.tau if t is None else t)
    pieces = _Pieces(dataset, fit, t, _propensity(fit, variant))
    n = dataset.n
    xi_sum = np.zeros(n)
    for sign, s, u in pieces.terms():
        pe0, pe1 = pieces.phi_eta(0, u), pieces.phi_eta(1, u)
        pg0, pg1 = pieces.phi_gamma(0, s, u), pieces.phi_gamma(1, s, u)
        xi = pe0 * pg1.mean() + pe0.mean() * pg1 - pe1 * pg0.mean() - pe1.mean() * pg0
        xi_sum += sign * xi
    point = xi_sum.mean() / 2.0
    return _result(estimand_id, t, point, xi_sum - point, alpha, f"aipw;{variant}")


def _zeta(pieces: _Pieces, a: int, s: int, u: int) -> np.ndarray:
    fit = pieces.fit
    pa, pb = fit.p(a, u), fit.p(1 - a, u)
    pm = pa * fit.mu(a, s, u)
    return (pa * pb * fit.mu(a, s, u)
            + pieces.weight[1 - a] * (pieces.risk(u) - pb) * pm
            + pb * pieces.weight[a] * (pieces.Y[:, s] * pieces.risk(u) - pm))


def _cplot_arm_parts(pieces: _Pieces):
    n = pieces.A.size
    num = np.zeros(n)
    den = np.zeros(n)
    for sign, s, u in pieces.terms():
        num += sign * _zeta(pieces, 1, s, u)
        den += sign * _zeta(pieces, 0, s, u)
    return num, den


def cplot(dataset: TrialDataset, fit: NuisanceFit, t: int | None = None,
          variant: str = "semiparametric", alpha: float = 0.05,
          estimand_id: str = "CPLOT") -> EstimateResult:
    """Debiased estimator of the covariate-matched (conditional) PLOT contrast."""
    t = _check_horizon(dataset, dataset.tau if t is None else t)
    pieces = _Pieces(dataset, fit, t, _propensity(fit, variant))
    num, den = _cplot_arm_parts(pieces)
    bracket = num - den
    return _result(estimand_id, t, bracket.mean(), bracket, alpha, f"aipw;{variant}")


# ------------------------------------------------------------- unadjusted O(n)

def marginal_nuisance(dataset: TrialDataset) -> NuisanceFit:
    """Covariate-free nuisances: arm-specific survival proportions and stratum means."""
    bare = TrialDataset(np.zeros((dataset.n, 0)), dataset.arm, dataset.ice_time,
                        dataset.outcomes, dataset.ids)
    fit = fit_nuisance(bare, LearnerSpec(baseline_outcome=False), folds=1)
    return NuisanceFit(fit.p_hat, fit.mu_hat, float(dataset.arm.mean()), fit.folds)


def plot_unadj_fast(dataset: TrialDataset, t: int | None = None, alpha: float = 0.05,
                    fit: NuisanceFit | None = None) -> EstimateResult:
    """Linear-time form of the all-pairs estimator, with an influence-function SE."""
    t = _check_horizon(dataset, dataset.tau if t is None else t)
    Y, T, A = dataset.filled_outcomes(), dataset.ice_time, dataset.arm.astype(float)
    pi1 = A.mean()
    surv = {a: np.array([1.0] + [np.mean(T[A == a] > s) for s in range(t + 1)]) for a in (0, 1)}
    wt1, wt0 = A / pi1, (1 - A) / (1 - pi1)
    total = np.zeros(dataset.n)
    for s in range(t + 1):
        # surv[a][s] is P(T > s - 1 | A = a)
        total += Y[:, s] * (T > s - 1) * (wt1 * surv[0][s] - wt0 * surv[1][s])
        if t > s:
            total -= Y[:, s] * (T > s) * (wt1 * surv[0][s + 1] - wt0 * surv[1][s + 1])
    point = total.mean()
    fit = marginal_nuisance(dataset) if fit is None else fit
    pieces = _Pieces(dataset, fit, t, fit.pi_hat)
    xi_sum = np.zeros(dataset.n)
    for sign, s, u in pieces.terms():
        pe0, pe1 = pieces.phi_eta(0, u), pieces.phi_eta(1, u)
        pg0, pg1 = pieces.phi_gamma(0, s, u), pieces.phi_gamma(1, s, u)
        xi_sum += sign * (pe0 * pg1.mean() + pe0.mean() * pg1 - pe1 * pg0.mean() - pe1.mean() * pg0)
    return _result("PLOT_unadj", t, point, xi_sum - point, alpha, "linear")


# ------------------------------------------------------------------- ratios

def ratio_estimand(dataset: TrialDataset, fit: NuisanceFit, t: int | None = None,
                   which: str = "PLOT", variant: str = "semiparametric",
                   alpha: float = 0.05) -> EstimateResult:
    """Treated-over-control ratio of the paired outcome means; delta-method SE."""
    t = _check_horizon(dataset, dataset.tau if t is None else t)
    which = which.upper()
    pieces = _Pieces(dataset, fit, t, _propensity(fit, variant))
    if which == "PLOT":
        num, den = _plot_arm_parts(pieces)
    elif which == "CPLOT":
        num, den = _cplot_arm_parts(pieces)
    else:
        raise EstimationError(f"unknown ratio estimand {which!r}")
    N, D = num.mean(), den.mean()
    if abs(D) <= DENOMINATOR_FLOOR:
        raise EstimationError("denominator below threshold")
    ratio = N / D
    contributions = ratio + ((num - N) - ratio * (den - D)) / D
    result = _result(f"{which}_ratio", t, ratio, contributions, alpha, f"aipw;{variant};delta")
    result.extra.update(numerator=float(N), denominator=float(D))
    return result


# ---------------------------------------------------------------------- tests

def wald_test(result: EstimateResult, null_value: float = 0.0) -> tuple[float, float]:
    """Two-sided z test of ``point == null_value``."""
    if not result.se > 0:
        raise EstimationError("standard error must be positive")
    z = (result.point - null_value) / result.se
    return float(z), float(2 * norm.sf(abs(z)))
