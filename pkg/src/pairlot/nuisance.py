"""Cross-fitted nuisance estimation.

Survival probabilities ``p_{a,s}(X) = P(T > s | A=a, X)`` come from a pooled
discrete-time hazard model per arm, so predicted survival is monotone in s by
construction.  Outcome means ``mu_{a,s,u}(X) = E{Y(s) | A=a, X, T > u}`` for
``u in {s-1, s}`` come from long-format regressions with the visit index as a
feature.  Here X is the adjustment set: the baseline covariates, plus the
baseline outcome Y(0) when ``LearnerSpec.baseline_outcome`` is on (then
``mu_{a,0,u}`` is Y(0) itself).

Array layout
------------
``p_hat[a, i, s + 1]`` for s = -1..tau (column 0 is identically 1).
``mu_hat[a, i, s, 0]`` conditions on T > s - 1, ``mu_hat[a, i, s, 1]`` on T > s.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .data import TrialDataset
from .learners import LearnerSpec, SuperLearner

log = logging.getLogger(__name__)

PI_CLIP = 0.01


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    p_hat: np.ndarray  # (2, n, tau + 2)
    mu_hat: np.ndarray  # (2, n, tau + 1, 2)
    pi_hat: float
    folds: np.ndarray  # (n,)

    @property
    def n(self) -> int:
        return self.p_hat.shape[1]

    @property
    def tau(self) -> int:
        return self.p_hat.shape[2] - 2

    def p(self, a: int, s: int) -> np.ndarray:
        return self.p_hat[a, :, s + 1]

    def mu(self, a: int, s: int, u: int) -> np.ndarray:
        return self.mu_hat[a, :, s, u - s + 1]

    def check(self) -> list[str]:
        """Invariant violations (empty when the fit is well formed)."""
        problems = []
        p = self.p_hat
        if not np.all(np.isfinite(p)) or not np.all(np.isfinite(self.mu_hat)):
            problems.append("non-finite prediction")
        if np.any(p < 0) or np.any(p > 1):
            problems.append("survival outside [0, 1]")
        if np.any(np.diff(p, axis=2) > 1e-12):
            problems.append("survival not monotone in s")
        if np.any(p[:, :, 0] != 1.0):
            problems.append("p_{a,-1} != 1")
        if not PI_CLIP <= self.pi_hat <= 1 - PI_CLIP:
            problems.append("propensity outside clipping bounds")
        return problems

    def to_csv(self, path) -> None:
        """Long-format dump: one row per (subject, a, s, u)."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["subject", "fold", "a", "s", "u", "p_hat_u", "mu_hat"])
            for i in range(self.n):
                for a in (0, 1):
                    for s in range(self.tau + 1):
                        for u in (s - 1, s):
                            if u >= self.tau:
                                continue
                            writer.writerow([i, int(self.folds[i]), a, s, u,
                                             repr(float(self.p(a, u)[i])),
                                             repr(float(self.mu(a, s, u)[i]))])


# ------------------------------------------------------------------ helpers

def adjustment_set(dataset: TrialDataset, spec: LearnerSpec) -> np.ndarray:
    if spec.baseline_outcome:
        return np.column_stack([dataset.covariates, dataset.outcomes[:, 0]])
    return dataset.covariates


def make_folds(dataset: TrialDataset, k: int, seed=0) -> np.ndarray:
    """Fold labels stratified jointly by arm and by reaching the last visit."""
    if k < 1:
        raise ValueError("folds must be >= 1")
    n = dataset.n
    labels = np.zeros(n, dtype=int)
    if k == 1:
        return labels
    rng = np.random.default_rng(seed)
    strata = 2 * dataset.arm + (dataset.ice_time == dataset.tau)
    offset = 0
    for stratum in range(4):
        members = np.flatnonzero(strata == stratum)
        members = members[rng.permutation(members.size)]
        labels[members] = (np.arange(members.size) + offset) % k
        offset += members.size
    return labels


def _fold_pairs(folds: np.ndarray):
    """(train mask, test mask) per fold; a single fold trains and predicts on all."""
    uniq = np.unique(folds)
    if uniq.size == 1:
        everyone = np.ones(folds.size, dtype=bool)
        yield everyone, everyone
        return
    for f in uniq:
        test = folds == f
        yield ~test, test


def _is_binary(values: np.ndarray) -> bool:
    v = values[np.isfinite(values)]
    return v.size > 0 and np.all((v == 0) | (v == 1))


def _time_features(s: np.ndarray, tau: int, encoding: str, first: int) -> np.ndarray:
    if encoding == "numeric":
        return s[:, None].astype(float)
    levels = np.arange(first + 1, tau + 1)
    return (s[:, None] == levels[None, :]).astype(float)


def _resolve_folds(dataset, folds, seed):
    if np.ndim(folds) == 0:
        return make_folds(dataset, int(folds), seed)
    folds = np.asarray(folds, dtype=int)
    if folds.shape != (dataset.n,):
        raise ValueError("fold labels must have one entry per subject")
    return folds


# ------------------------------------------------------------ survival part

def fit_survival(dataset: TrialDataset, spec: LearnerSpec | None = None, folds=5,
                 seed=0) -> np.ndarray:
    """Out-of-fold survival predictions ``p_hat`` of shape (2, n, tau + 2)."""
    spec = spec or LearnerSpec()
    folds = _resolve_folds(dataset, folds, seed)
    X = adjustment_set(dataset, spec)
    tau, n = dataset.tau, dataset.n
    T, A = dataset.ice_time, dataset.arm
    hazard = np.ones((2, n, tau))
    for k, (train, test) in enumerate(_fold_pairs(folds)):
        test_idx = np.flatnonzero(test)
        for a in (0, 1):
            rows = np.flatnonzero(train & (A == a))
            at_risk = np.array([(T[rows] >= s).sum() for s in range(tau)])
            if X.shape[1] == 0:
                events = np.array([(T[rows] == s).sum() for s in range(tau)])
                with np.errstate(invalid="ignore", divide="ignore"):
                    h = np.where(at_risk > 0, events / np.maximum(at_risk, 1), 1.0)
                hazard[a][np.ix_(test_idx, np.arange(tau))] = h[None, :]
            elif rows.size:
                subj, s_long = [], []
                for s in range(tau):
                    r = rows[T[rows] >= s]
                    subj.append(r)
                    s_long.append(np.full(r.size, s))
                subj = np.concatenate(subj)
                s_long = np.concatenate(s_long)
                design = np.column_stack([X[subj], _time_features(s_long, tau - 1, "onehot", 0)])
                target = (T[subj] == s_long).astype(float)
                model = SuperLearner(spec.build(binary=True, seed=seed + k), binary=True,
                                     inner_folds=spec.inner_folds, stacking=spec.stacking,
                                     seed=seed + 31 * k + a).fit(design, target, groups=subj)
                for s in range(tau):
                    grid = np.column_stack([X[test_idx], _time_features(np.full(test_idx.size, s),
                                                                        tau - 1, "onehot", 0)])
                    hazard[a][test_idx, s] = model.predict(grid)
            empty = np.flatnonzero(at_risk == 0)
            if empty.size:
                log.warning("arm %d fold %d: no subjects at risk at s=%s; hazard set to 1",
                            a, k, empty.tolist())
                hazard[a][np.ix_(test_idx, empty)] = 1.0
    hazard = np.clip(hazard, 0.0, 1.0)
    p_hat = np.ones((2, n, tau + 2))
    p_hat[:, :, 1:tau + 1] = np.cumprod(1.0 - hazard, axis=2)
    p_hat[:, :, tau + 1] = 0.0
    return p_hat


# ------------------------------------------------------------- outcome part

def fit_outcome_means(dataset: TrialDataset, spec: LearnerSpec | None = None, folds=5,
                      seed=0) -> np.ndarray:
    """Out-of-fold outcome-mean predictions ``mu_hat`` of shape (2, n, tau + 1, 2)."""
    spec = spec or LearnerSpec()
    folds = _resolve_folds(dataset, folds, seed)
    X = adjustment_set(dataset, spec)
    tau, n = dataset.tau, dataset.n
    T, A = dataset.ice_time, dataset.arm
    Y = dataset.filled_outcomes()
    carry = spec.baseline_outcome
    binary = _is_binary(dataset.outcomes)
    mu_hat = np.zeros((2, n, tau + 1, 2))
    for k, (train, test) in enumerate(_fold_pairs(folds)):
        test_idx = np.flatnonzero(test)
        for a in (0, 1):
            rows = np.flatnonzero(train & (A == a))
            grand = Y[rows][dataset.observed[rows]]
            fallback = float(grand.mean()) if grand.size else 0.0
            for col in (0, 1):
                # u = s - 1 (col 0) or u = s (col 1); u = tau is never needed
                s_values = [s for s in range(tau + 1) if s - 1 + col < tau and not (carry and s == 0)]
                if X.shape[1] == 0:
                    for s in s_values:
                        r = rows[T[rows] > s - 1 + col]
                        mu_hat[a][test_idx, s, col] = Y[r, s].mean() if r.size else fallback
                    continue
                subj, s_long = [], []
                for s in s_values:
                    r = rows[T[rows] > s - 1 + col]
                    subj.append(r)
                    s_long.append(np.full(r.size, s))
                subj = np.concatenate(subj) if subj else np.empty(0, int)
                s_long = np.concatenate(s_long) if s_long else np.empty(0, int)
                if subj.size == 0:
                    log.warning("arm %d fold %d u-offset %d: empty at-risk set, using grand mean",
                                a, k, col)
                    mu_hat[a][np.ix_(test_idx, s_values, [col])] = fallback
                    continue
                first = 1 if carry else 0
                design = np.column_stack([X[subj], _time_features(s_long, tau, spec.time_encoding, first)])
                model = SuperLearner(spec.build(binary=binary, seed=seed + k), binary=binary,
                                     inner_folds=spec.inner_folds, stacking=spec.stacking,
                                     seed=seed + 17 * k + 2 * a + col).fit(design, Y[subj, s_long],
                                                                        groups=subj)
                for s in s_values:
                    grid = np.column_stack([X[test_idx],
                                            _time_features(np.full(test_idx.size, s), tau,
                                                           spec.time_encoding, first)])
                    mu_hat[a][test_idx, s, col] = model.predict(grid)
    if carry:
        mu_hat[:, :, 0, :] = dataset.outcomes[None, :, 0, None]
    mu_hat[:, :, tau, 1] = 0.0
    return mu_hat


def fit_propensity(dataset: TrialDataset) -> float:
    arms = set(np.unique(dataset.arm).tolist())
    if arms != {0, 1}:
        raise ValueError("both arms must be present")
    return float(np.clip(dataset.arm.mean(), PI_CLIP, 1 - PI_CLIP))


def fit_nuisance(dataset: TrialDataset, spec: LearnerSpec | None = None, folds=5,
                 seed=0) -> NuisanceFit:
    """Cross-fit every nuisance function; ``folds=1`` fits and predicts on the full sample."""
    spec = spec or LearnerSpec()
    labels = _resolve_folds(dataset, folds, seed)
    return NuisanceFit(
        p_hat=fit_survival(dataset, spec, labels, seed),
        mu_hat=fit_outcome_means(dataset, spec, labels, seed),
        pi_hat=fit_propensity(dataset),
        folds=labels,
    )


def corrupt(fit: NuisanceFit, mode: str = "constant", seed=0) -> NuisanceFit:
    """Deliberately misspecified survival and outcome predictions; the propensity is kept.

    ``constant``: p = 0.5 at every visit before tau and mu = 0.
    ``noisy``: multiply by random factors in [0.5, 1.5], then restore the
    range and monotonicity of the survival curve.
    """
    tau = fit.tau
    p = fit.p_hat.copy()
    if mode == "constant":
        p[:, :, 1:tau + 1] = 0.5
        mu = np.zeros_like(fit.mu_hat)
    elif mode == "noisy":
        rng = np.random.default_rng(seed)
        p[:, :, 1:tau + 1] *= rng.uniform(0.5, 1.5, size=p[:, :, 1:tau + 1].shape)
        p = np.minimum.accumulate(np.clip(p, 0.0, 1.0), axis=2)
        mu = fit.mu_hat * rng.uniform(0.5, 1.5, size=fit.mu_hat.shape)
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    p[:, :, 0] = 1.0
    p[:, :, tau + 1] = 0.0
    return replace(fit, p_hat=p, mu_hat=mu)


def with_propensity(fit: NuisanceFit, pi_hat: float) -> NuisanceFit:
    return replace(fit, pi_hat=float(pi_hat))
