"""Regression learners and a cross-validated stacking ensemble.

All learners share a tiny interface, ``fit(X, y)`` and ``predict(X)``, and
know whether they model a continuous mean or a probability (``binary``).
Features are standardized internally; intercepts are never penalized.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

PROB_CLIP = 1e-9


# ----------------------------------------------------------------- GLM core

def _standardize(X: np.ndarray):
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    keep = scale > 1e-12
    return center, np.where(keep, scale, 1.0), keep


def ridge_solve(X: np.ndarray, y: np.ndarray, alpha: float, weights=None) -> tuple[float, np.ndarray]:
    """Weighted ridge regression with an unpenalized intercept."""
    w = np.ones(len(y)) if weights is None else np.asarray(weights, float)
    sw = w.sum()
    xm = w @ X / sw
    ym = w @ y / sw
    Xc = X - xm
    A = (Xc * w[:, None]).T @ Xc
    A[np.diag_indices_from(A)] += alpha
    beta = np.linalg.lstsq(A, (Xc * w[:, None]).T @ (y - ym), rcond=None)[0]
    return float(ym - xm @ beta), beta


def logistic_solve(X: np.ndarray, y: np.ndarray, alpha: float = 0.0, weights=None,
                   max_iter: int = 100, tol: float = 1e-10) -> tuple[float, np.ndarray, bool]:
    """Penalized logistic regression by damped Newton.

    Returns ``(intercept, coef, converged)``.  ``converged`` is False when the
    iterations stall or the coefficients diverge (quasi-separation).
    """
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, float)
    Z = np.column_stack([np.ones(n), X])
    pen = np.full(p + 1, alpha)
    pen[0] = 0.0
    ybar = np.clip(w @ y / w.sum(), 1e-6, 1 - 1e-6)
    theta = np.zeros(p + 1)
    theta[0] = np.log(ybar / (1 - ybar))

    def objective(th):
        eta = Z @ th
        return (w @ (np.logaddexp(0.0, eta) - y * eta)) + 0.5 * (pen * th * th).sum()

    current = objective(theta)
    converged = False
    for _ in range(max_iter):
        mu = expit(Z @ theta)
        grad = Z.T @ (w * (mu - y)) + pen * theta
        H = (Z * (w * mu * (1 - mu))[:, None]).T @ Z
        H[np.diag_indices_from(H)] += pen + 1e-12
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            candidate = theta - t * step
            value = objective(candidate)
            if value <= current + 1e-12 or t < 1e-8:
                break
            t *= 0.5
        decrease = current - value
        theta, current = candidate, value
        if abs(decrease) <= tol * (1 + abs(current)) and np.max(np.abs(grad)) < 1e-6 * (1 + n):
            converged = True
            break
    if np.max(np.abs(theta)) > 30:
        converged = False
    return float(theta[0]), theta[1:], converged


def fit_logistic(X, y, weights=None, alpha: float = 0.0, fallback: float = 1e-4,
                 context: str = "logistic fit") -> tuple[float, np.ndarray]:
    """Logistic MLE with a ridge fallback when the fit separates."""
    b0, beta, ok = logistic_solve(X, y, alpha, weights)
    if not ok and fallback > alpha:
        log.warning("%s: separation or non-convergence, refitting with ridge %g", context, fallback)
        b0, beta, ok = logistic_solve(X, y, fallback, weights)
    return b0, beta


# ----------------------------------------------------------------- learners

class Learner:
    name = "learner"
    binary = False

    def fit(self, X, y):
        raise NotImplementedError

    def predict(self, X):
        raise NotImplementedError

    def clone(self):
        return type(self)(**self._params())

    def _params(self) -> dict:
        return {"binary": self.binary}


class MeanLearner(Learner):
    """Predicts the training mean."""

    name = "mean"

    def __init__(self, binary=False):
        self.binary = binary

    def fit(self, X, y):
        self.value_ = float(np.mean(y)) if len(y) else 0.0
        return self

    def predict(self, X):
        return np.full(X.shape[0], self.value_)


class GLMLearner(Learner):
    """Main-effects linear (continuous) or logistic (binary) regression.

    ``alpha`` is a ridge penalty on standardized coefficients.
    """

    def __init__(self, binary=False, alpha=0.0):
        self.binary = binary
        self.alpha = float(alpha)
        self.name = "glm" if alpha == 0 else f"ridge({alpha:g})"

    def _params(self):
        return {"binary": self.binary, "alpha": self.alpha}

    def _design(self, X):
        return X

    def fit(self, X, y):
        D = self._design(X)
        self.center_, self.scale_, self.keep_ = _standardize(D)
        Z = ((D - self.center_) / self.scale_)[:, self.keep_]
        self.constant_ = None
        if len(y) == 0:
            self.constant_ = 0.0
            return self
        if np.ptp(y) == 0:
            self.constant_ = float(y[0])
            return self
        if self.binary:
            # a hair of ridge keeps unpenalized fits finite under separation
            self.b0_, self.beta_ = fit_logistic(Z, y, alpha=max(self.alpha, 1e-8),
                                                context=self.name)
        else:
            self.b0_, self.beta_ = ridge_solve(Z, y, max(self.alpha, 1e-10))
        return self

    def predict(self, X):
        if self.constant_ is not None:
            return np.full(X.shape[0], self.constant_)
        D = self._design(X)
        eta = self.b0_ + ((D - self.center_) / self.scale_)[:, self.keep_] @ self.beta_
        return expit(eta) if self.binary else eta


class SplineLearner(GLMLearner):
    """Piecewise-linear basis (hinges at quantile knots) plus a lightly penalized GLM.

    Columns with two or fewer distinct values are passed through unexpanded.
    """

    def __init__(self, binary=False, alpha=1e-3, n_knots=3):
        super().__init__(binary=binary, alpha=alpha)
        self.n_knots = int(n_knots)
        self.name = f"spline({self.n_knots})"

    def _params(self):
        return {"binary": self.binary, "alpha": self.alpha, "n_knots": self.n_knots}

    def fit(self, X, y):
        self.knots_ = []
        qs = np.linspace(0, 1, self.n_knots + 2)[1:-1]
        for j in range(X.shape[1]):
            col = X[:, j]
            if len(np.unique(col)) <= 2:
                self.knots_.append(np.empty(0))
            else:
                self.knots_.append(np.unique(np.quantile(col, qs)))
        return super().fit(X, y)

    def _design(self, X):
        parts = [X]
        for j, knots in enumerate(self.knots_):
            if knots.size:
                parts.append(np.maximum(X[:, [j]] - knots[None, :], 0.0))
        return np.hstack(parts)


class BaggedTreesLearner(Learner):
    """Bootstrap-aggregated depth-limited regression trees (random-forest role)."""

    def __init__(self, binary=False, n_trees=50, max_depth=4, min_leaf=5, seed=0):
        self.binary = binary
        self.n_trees, self.max_depth, self.min_leaf, self.seed = n_trees, max_depth, min_leaf, seed
        self.name = f"trees({n_trees},{max_depth})"

    def _params(self):
        return {"binary": self.binary, "n_trees": self.n_trees, "max_depth": self.max_depth,
                "min_leaf": self.min_leaf, "seed": self.seed}

    def fit(self, X, y):
        from sklearn.ensemble import BaggingRegressor
        from sklearn.tree import DecisionTreeRegressor

        if len(y) < 2 or X.shape[1] == 0:
            self.model_ = MeanLearner().fit(X, y)
            return self
        tree = DecisionTreeRegressor(max_depth=self.max_depth, min_samples_leaf=self.min_leaf,
                                     max_features=max(1, int(np.ceil(np.sqrt(X.shape[1])))) if X.shape[1] > 3 else None)
        self.model_ = BaggingRegressor(tree, n_estimators=self.n_trees, random_state=self.seed).fit(X, y)
        return self

    def predict(self, X):
        pred = self.model_.predict(X)
        return np.clip(pred, 0.0, 1.0) if self.binary else pred


# ----------------------------------------------------------------- stacking

def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / np.arange(1, len(v) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


class _StackObjective:
    """CV loss of a convex combination and its gradient.

    Squared error works from the k x k Gram matrix, so each evaluation costs
    O(k^2) regardless of the number of rows.
    """

    def __init__(self, P, y, loss):
        self.loss = loss
        self.P, self.y = P, y
        if loss == "squared":
            n = len(y)
            self.G = P.T @ P / n
            self.b = P.T @ y / n
            self.c = y @ y / n

    def value(self, w):
        if self.loss == "squared":
            return float(w @ self.G @ w - 2 * self.b @ w + self.c)
        pred = np.clip(self.P @ w, PROB_CLIP, 1 - PROB_CLIP)
        y = self.y
        return float(-np.mean(y * np.log(pred) + (1 - y) * np.log(1 - pred)))

    def grad(self, w):
        if self.loss == "squared":
            return 2 * (self.G @ w - self.b)
        pred = np.clip(self.P @ w, PROB_CLIP, 1 - PROB_CLIP)
        y = self.y
        return -self.P.T @ (y / pred - (1 - y) / (1 - pred)) / len(y)


def stack_loss(P: np.ndarray, y: np.ndarray, w: np.ndarray, loss: str) -> float:
    return _StackObjective(np.asarray(P, float), np.asarray(y, float), loss).value(w)


def _stack_exact(obj: _StackObjective, k: int) -> np.ndarray:
    """Squared-loss stacking for small libraries by enumerating supports.

    Each support gives an equality-constrained quadratic solved through its
    KKT system; the best nonnegative candidate is the simplex optimum.
    """
    best_w, best_f = None, np.inf
    for mask in range(1, 2 ** k):
        S = [j for j in range(k) if mask >> j & 1]
        m = len(S)
        K = np.zeros((m + 1, m + 1))
        K[:m, :m] = 2 * obj.G[np.ix_(S, S)]
        K[:m, m] = K[m, :m] = 1.0
        rhs = np.append(2 * obj.b[S], 1.0)
        sol = np.linalg.lstsq(K, rhs, rcond=None)[0][:m]
        if np.any(sol < -1e-12) or abs(sol.sum() - 1) > 1e-9:
            continue
        w = np.zeros(k)
        w[S] = np.maximum(sol, 0)
        w /= w.sum()
        f = obj.value(w)
        if f < best_f - 1e-15:
            best_w, best_f = w, f
    return best_w


def stack(base_predictions, targets, loss: str = "squared", tol: float = 1e-8,
          max_iter: int = 10_000, mean_index: int | None = None) -> np.ndarray:
    """Convex weights minimizing the CV loss of the combined prediction.

    Squared loss with at most eight learners is solved exactly over
    supports.  Otherwise: spectral (Barzilai-Borwein) projected gradient with a monotone
    backtracking line search, started from the best single learner, so the
    result never does worse than any vertex.  Stops when an iteration moves
    the weights by less than ``tol``.  Zero-variance targets put all weight
    on ``mean_index`` (default 0).
    """
    P = np.asarray(base_predictions, float)
    y = np.asarray(targets, float)
    if P.ndim == 1:
        P = P[:, None]
    k = P.shape[1]
    if k == 0:
        raise ValueError("at least one base learner is required")
    if loss not in ("squared", "logloss"):
        raise ValueError(f"unknown stacking loss {loss!r}")
    if k == 1:
        return np.ones(1)
    if len(y) == 0 or np.ptp(y) == 0:
        w = np.zeros(k)
        w[0 if mean_index is None else mean_index] = 1.0
        return w
    obj = _StackObjective(P, y, loss)
    if loss == "squared" and k <= 8:
        return _stack_exact(obj, k)
    eye = np.eye(k)
    vertex = [obj.value(eye[j]) for j in range(k)]
    w = eye[int(np.argmin(vertex))]
    f = min(vertex)
    g = obj.grad(w)
    step = 1.0
    for _ in range(max_iter):
        direction = project_simplex(w - step * g) - w
        if np.max(np.abs(direction)) < tol:
            break
        slope = g @ direction
        lam = 1.0
        while True:
            cand = w + lam * direction
            fc = obj.value(cand)
            if fc <= f + 1e-4 * lam * slope or lam < 1e-10:
                break
            lam *= 0.5
        if fc > f:
            break
        g_new = obj.grad(cand)
        s_vec, y_vec = cand - w, g_new - g
        w, f, g = cand, fc, g_new
        if np.max(np.abs(s_vec)) < tol:
            break
        curv = s_vec @ y_vec
        step = float(np.clip(s_vec @ s_vec / curv, 1e-10, 1e10)) if curv > 0 else 1e10
    return w


@dataclass
class LearnerSpec:
    """Library of base learners and stacking options.

    ``library`` entries are names: ``mean``, ``glm``, ``ridge`` (one member
    per value in ``ridge_grid``), ``spline``, ``trees``.
    """

    library: list = field(default_factory=lambda: ["mean", "glm", "ridge", "spline"])
    ridge_grid: list = field(default_factory=lambda: [1.0, 10.0])
    n_knots: int = 3
    n_trees: int = 30
    max_depth: int = 3
    min_leaf: int = 5
    stacking: bool = True
    inner_folds: int = 5
    time_encoding: str = "numeric"
    baseline_outcome: bool = True

    def __post_init__(self):
        known = {"mean", "glm", "ridge", "spline", "trees"}
        if not self.library:
            raise ValueError("learner library must not be empty")
        unknown = set(self.library) - known
        if unknown:
            raise ValueError(f"unknown learners: {sorted(unknown)}")
        if any(a <= 0 for a in self.ridge_grid) or self.n_knots <= 0 or self.n_trees <= 0 \
                or self.max_depth <= 0 or self.min_leaf <= 0 or self.inner_folds < 2:
            raise ValueError("learner hyperparameters must be positive")
        if self.time_encoding not in ("numeric", "onehot"):
            raise ValueError("time_encoding must be 'numeric' or 'onehot'")

    def build(self, binary: bool, seed: int = 0) -> list[Learner]:
        out: list[Learner] = []
        for name in self.library:
            if name == "mean":
                out.append(MeanLearner(binary=binary))
            elif name == "glm":
                out.append(GLMLearner(binary=binary))
            elif name == "ridge":
                out.extend(GLMLearner(binary=binary, alpha=a) for a in self.ridge_grid)
            elif name == "spline":
                out.append(SplineLearner(binary=binary, n_knots=self.n_knots))
            elif name == "trees":
                out.append(BaggedTreesLearner(binary=binary, n_trees=self.n_trees,
                                              max_depth=self.max_depth, min_leaf=self.min_leaf,
                                              seed=seed))
        return out


class SuperLearner:
    """Stacked ensemble over a learner library using inner K-fold CV.

    ``groups`` (optional, one label per row) keeps all rows of a subject in
    the same inner fold, so long-format data never leaks across folds.
    """

    def __init__(self, learners: list[Learner], binary: bool, inner_folds: int = 5,
                 stacking: bool = True, seed: int = 0):
        self.learners = learners
        self.binary = binary
        self.inner_folds = inner_folds
        self.stacking = stacking
        self.seed = seed

    def fit(self, X, y, groups=None):
        X = np.asarray(X, float)
        y = np.asarray(y, float)
        k = len(self.learners)
        mean_index = next((j for j, l in enumerate(self.learners) if isinstance(l, MeanLearner)), 0)
        if k == 1 or not self.stacking or len(y) < 2 * self.inner_folds:
            if k == 1 or len(y) < 2 * self.inner_folds:
                self.weights_ = np.eye(k)[0 if k == 1 else mean_index]
            else:
                self.weights_ = np.full(k, 1.0 / k)
        else:
            cv = self.cv_predictions(X, y, groups)
            self.cv_predictions_ = cv
            self.weights_ = stack(cv, y, "logloss" if self.binary else "squared",
                                  mean_index=mean_index)
        self.fitted_ = [l.clone().fit(X, y) if w > 0 else None
                        for l, w in zip(self.learners, self.weights_)]
        return self

    def cv_predictions(self, X, y, groups=None) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        if groups is None:
            groups = np.arange(len(y))
        uniq, inv = np.unique(groups, return_inverse=True)
        labels = rng.permutation(len(uniq)) % self.inner_folds
        fold = labels[inv]
        out = np.zeros((len(y), len(self.learners)))
        for f in range(self.inner_folds):
            test = fold == f
            train = ~test
            if not test.any():
                continue
            for j, learner in enumerate(self.learners):
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    out[test, j] = learner.clone().fit(X[train], y[train]).predict(X[test])
        return out

    def predict(self, X):
        X = np.asarray(X, float)
        pred = np.zeros(X.shape[0])
        for model, w in zip(self.fitted_, self.weights_):
            if model is not None:
                pred += w * model.predict(X)
        return np.clip(pred, 0.0, 1.0) if self.binary else pred
