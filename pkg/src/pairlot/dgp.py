"""Simulation designs: three trial settings and the pedagogical example model.

Every generator draws the latent variables once and evaluates both arms on
them (common random numbers), producing a :class:`CounterfactualPanel`; the
factual dataset is that panel filtered through a randomized arm.

Random streams: a ``SeedSequence(seed)`` is spawned into one child stream per
latent family (arm, covariates, U, intercept, noise, ICE uniforms, ...), each
feeding a counter-based Philox generator.  Adding a family never shifts the
draws of another, and replicate ``k`` of an experiment uses
``SeedSequence([seed, k])``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from enum import Enum

import numpy as np
from scipy.special import expit

from .data import CounterfactualPanel, TrialDataset

WEIBULL_SHAPE = 1.5
_STREAMS = ("arm", "covariates", "unmeasured", "intercept", "noise", "ice", "marker", "binary")


class Setting(str, Enum):
    SETTING1 = "Setting1"
    SETTING2 = "Setting2"
    SETTING3 = "Setting3"
    EXAMPLE = "Example"

    @classmethod
    def parse(cls, value) -> "Setting":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace(" ", "")
        aliases = {"1": cls.SETTING1, "setting1": cls.SETTING1,
                   "2": cls.SETTING2, "setting2": cls.SETTING2,
                   "3": cls.SETTING3, "setting3": cls.SETTING3,
                   "example": cls.EXAMPLE, "4": cls.EXAMPLE}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown setting {value!r}") from None


@dataclass
class DgpConfig:
    """Parameters of one data-generating process.

    ``example_params`` is ``(beta0, beta1, gamma0, gamma1)``.  ``marker_slope``
    is the per-visit treatment effect on the Setting 2 switching marker.
    ``ice_arm_scale`` multiplies every treatment-dependent term of the ICE
    mechanism; 0 gives T^1 = T^0.  ``noise_sd`` and ``unmeasured_sd`` scale
    the Example model's error terms and its unmeasured covariate U.
    """

    setting: Setting = Setting.SETTING1
    n: int = 250
    tau: int = 5
    p_treat: float = 0.5
    example_params: tuple = (1.0, 0.0, 0.0, 0.0)
    seed: int = 0
    marker_slope: float = 0.5
    ice_arm_scale: float = 1.0
    noise_sd: float = 1.0
    unmeasured_sd: float = 1.0

    def __post_init__(self):
        self.setting = Setting.parse(self.setting)
        self.example_params = tuple(float(v) for v in self.example_params)
        if len(self.example_params) != 4:
            raise ValueError("example_params must have 4 entries (beta0, beta1, gamma0, gamma1)")
        reals = (self.p_treat, self.marker_slope, self.ice_arm_scale, self.noise_sd,
                 self.unmeasured_sd) + self.example_params
        if not all(math.isfinite(v) for v in reals):
            raise ValueError("non-finite parameter")
        if not 0 < self.p_treat < 1:
            raise ValueError("p_treat must lie in (0, 1)")
        if int(self.n) < 2:
            raise ValueError("n must be >= 2")
        if int(self.tau) < 1:
            raise ValueError("tau must be >= 1")
        if self.noise_sd < 0 or self.unmeasured_sd < 0:
            raise ValueError("scales must be non-negative")
        self.n, self.tau, self.seed = int(self.n), int(self.tau), int(self.seed)

    def replace(self, **changes) -> "DgpConfig":
        values = asdict(self)
        values.update(changes)
        return DgpConfig(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["setting"] = self.setting.value
        out["example_params"] = list(self.example_params)
        return out

    @property
    def n_covariates(self) -> int:
        return {Setting.SETTING1: 10, Setting.SETTING2: 0}.get(self.setting, 1)


def _streams(seed) -> dict[str, np.random.Generator]:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return {name: np.random.Generator(np.random.Philox(child))
            for name, child in zip(_STREAMS, ss.spawn(len(_STREAMS)))}


def _ar1_cov(dim: int, rho: float) -> np.ndarray:
    idx = np.arange(dim)
    return rho ** np.abs(idx[:, None] - idx[None, :])


def _weibull_floor(scale: np.ndarray, e: np.ndarray, tau: int) -> np.ndarray:
    """T = min(floor(T_ICE), tau) with T_ICE = scale * E^(1/k), E ~ Exp(1).

    Survival of T_ICE is exp(-(x / scale)^k).
    """
    t_ice = scale * e ** (1.0 / WEIBULL_SHAPE)
    return np.minimum(np.floor(t_ice), tau).astype(int)


def _draw_panel(config: DgpConfig, n: int, rng: dict, covariates=None):
    """Draw latents and evaluate both arms.  Returns (panel, unmeasured U)."""
    tau = config.tau
    times = np.arange(tau + 1, dtype=float)
    k = config.ice_arm_scale
    setting = config.setting
    exp_draw = rng["ice"].standard_exponential(n)

    if setting is Setting.SETTING1:
        L = (rng["covariates"].multivariate_normal(np.zeros(10), _ar1_cov(10, 0.5), size=n,
                                                   method="cholesky")
             if covariates is None else np.asarray(covariates, float))
        U = rng["unmeasured"].standard_normal(n)
        u = rng["intercept"].standard_normal(n)
        eps = rng["noise"].standard_normal((n, tau + 1))
        level = (L[:, 0] + L[:, 1] / 2 + L[:, 2] / 3 + L[:, 7] + L[:, 8] / 2 + L[:, 9] / 3
                 + 2 * U ** 2 + u)
        y = 0.5 + 0.2 * times[None, :] + level[:, None] + eps
        outcomes = (y, y)
        base = (2.5 - L[:, 3] / 4 - L[:, 4] / 5 - L[:, 5] / 6
                + L[:, 7] / 4 + L[:, 8] / 5 + L[:, 9] / 6)
        ice = tuple(
            _weibull_floor(np.exp(base + k * (0.8 * a + 0.2 * (2 * a - 1) * U ** 2)), exp_draw, tau)
            for a in (0, 1))

    elif setting is Setting.SETTING2:
        L = np.zeros((n, 0))
        U = rng["unmeasured"].standard_normal(n)
        y = (0.5 + 0.2 * times[None, :] + U[:, None]
             + rng["noise"].standard_normal((n, tau + 1)))
        outcomes = (y, y)
        marker_noise = rng["marker"].standard_normal((n, tau + 1))
        ice = []
        for a in (0, 1):
            z = (k * config.marker_slope * a * times + 0.2 * times)[None, :] + U[:, None] + marker_noise
            # switching is triggered by post-baseline visits only
            exceed = z[:, 1:] > 2
            first = np.argmax(exceed, axis=1) + 1
            ice.append(np.where(exceed.any(axis=1), first, tau).astype(int))
        ice = tuple(ice)

    elif setting is Setting.SETTING3:
        L = (rng["covariates"].standard_normal((n, 1)) if covariates is None
             else np.asarray(covariates, float).reshape(n, 1))
        U = rng["unmeasured"].standard_normal(n)
        prob = expit(0.5 * times[None, :] + 5 * L + U[:, None])
        y = (rng["binary"].random((n, tau + 1)) < prob).astype(float)
        y[:, 0] = 0.0
        outcomes = (y, y)
        ice = tuple(_weibull_floor(np.exp(2.5 + k * 0.8 * a + L[:, 0]), exp_draw, tau)
                    for a in (0, 1))

    else:
        b0, b1, g0, g1 = config.example_params
        L = (rng["covariates"].standard_normal((n, 1)) if covariates is None
             else np.asarray(covariates, float).reshape(n, 1))
        U = config.unmeasured_sd * rng["unmeasured"].standard_normal(n)
        eps = config.noise_sd * rng["noise"].standard_normal((n, tau + 1))
        l0 = L[:, 0]
        # alpha(t) = 0: additive time trends cancel in every contrast
        y = (b0 * l0 + g0 * U)[:, None] + (b1 * l0 + g1 * U)[:, None] * times[None, :] + eps
        outcomes = (y, y)
        ice = tuple(
            _weibull_floor(np.exp(2.5 + k * 0.8 * a + l0 + k * 0.2 * (2 * a - 1) * U), exp_draw, tau)
            for a in (0, 1))

    return CounterfactualPanel(L, outcomes, ice), U


def generate(config: DgpConfig, seed=None) -> tuple[TrialDataset, CounterfactualPanel]:
    """Draw a factual trial dataset and its counterfactual panel.

    ``seed`` overrides ``config.seed``; it may be an int or a SeedSequence.
    """
    rng = _streams(config.seed if seed is None else seed)
    panel, _ = _draw_panel(config, config.n, rng)
    arm = (rng["arm"].random(config.n) < config.p_treat).astype(int)
    return panel.factual(arm), panel


def t_distribution_table(config: DgpConfig, n_large: int = 1_000_000, seed=None) -> np.ndarray:
    """Percentage of each arm with T = 0..tau; shape (tau + 1, 2), columns A=0, A=1."""
    if n_large < 10_000:
        raise ValueError("n_large must be at least 10^4")
    data, _ = generate(config.replace(n=n_large), seed=seed)
    table = np.zeros((config.tau + 1, 2))
    for a in (0, 1):
        counts = np.bincount(data.ice_time[data.arm == a], minlength=config.tau + 1)
        table[:, a] = 100.0 * counts / counts.sum()
    return table


@dataclass
class OracleValue:
    value: float
    mc_se: float
    n_pairs: int
    analytic: float | None = field(default=None)
    analytic_se: float | None = field(default=None)
    numerator: float | None = field(default=None)
    denominator: float | None = field(default=None)

    @property
    def ratio(self) -> float:
        """Treated-over-control ratio of the paired outcome means."""
        return self.numerator / self.denominator


def _pair_draws(config: DgpConfig, which: str, n_pairs: int, seed):
    ss = np.random.SeedSequence(config.seed if seed is None else seed)
    first, second = ss.spawn(2)
    p1, u1 = _draw_panel(config, n_pairs, _streams(first))
    shared = p1.covariates if which == "CPLOT" else None
    p2, u2 = _draw_panel(config, n_pairs, _streams(second), covariates=shared)
    return p1, u1, p2, u2


def true_estimand(config: DgpConfig, which: str = "PLOT", t: int | None = None,
                  n_oracle: int = 1_000_000, seed=None) -> OracleValue:
    """Monte Carlo value of the PLOT or CPLOT additive contrast at horizon ``t``.

    Each draw pairs a treated counterfactual subject with an independent
    control one; for CPLOT the second subject is re-drawn with the first
    subject's covariates.  For the Example model the closed-form reduction
    beta1 E{(L - L*) m} + gamma1 E{(U - U*) m} is evaluated on the same draws.
    """
    which = which.upper()
    if which not in ("PLOT", "CPLOT"):
        raise ValueError(f"unknown estimand {which!r}")
    t = config.tau if t is None else int(t)
    p1, u1, p2, u2 = _pair_draws(config, which, n_oracle, seed)
    m = np.minimum(np.minimum(p1.ice_time[1], p2.ice_time[0]), t)
    idx = np.arange(n_oracle)
    diff = p1.outcomes[1][idx, m] - p2.outcomes[0][idx, m]
    out = OracleValue(float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(n_oracle)), n_oracle,
                      numerator=float(p1.outcomes[1][idx, m].mean()),
                      denominator=float(p2.outcomes[0][idx, m].mean()))
    if config.setting is Setting.EXAMPLE:
        _, b1, _, g1 = config.example_params
        terms = (b1 * (p1.covariates[:, 0] - p2.covariates[:, 0]) + g1 * (u1 - u2)) * m
        out.analytic = float(terms.mean())
        out.analytic_se = float(terms.std(ddof=1) / math.sqrt(n_oracle))
    return out


# ------------------------------------------------- Example-model oracle nuisances

def example_oracle_nuisance(config: DgpConfig, dataset: TrialDataset, n_nodes: int = 60):
    """Closed-form p_{a,s}(L) and mu_{a,s,u}(L) for the Example model.

    Integrates the unmeasured U out by Gauss-Hermite quadrature.  The
    propensity is the sample proportion.
    """
    from .nuisance import NuisanceFit, fit_propensity

    if config.setting is not Setting.EXAMPLE:
        raise ValueError("oracle nuisances are available for the Example model only")
    b0, b1, g0, g1 = config.example_params
    k = config.ice_arm_scale
    tau = dataset.tau
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    weights = weights / weights.sum()
    U = config.unmeasured_sd * nodes  # (q,)
    L = dataset.covariates[:, 0]
    n = dataset.n
    p_hat = np.ones((2, n, tau + 2))
    mu_hat = np.zeros((2, n, tau + 1, 2))
    for a in (0, 1):
        scale = np.exp(2.5 + k * 0.8 * a + L[:, None] + k * 0.2 * (2 * a - 1) * U[None, :])
        cond_u = np.zeros((n, tau + 1))  # E[U | L, T^a > u] for u = -1..tau-1
        for u in range(tau):
            surv = np.exp(-((u + 1) / scale) ** WEIBULL_SHAPE)  # P(T > u | L, U)
            mass = surv @ weights
            p_hat[a, :, u + 1] = mass
            cond_u[:, u + 1] = (surv * U[None, :]) @ weights / np.maximum(mass, 1e-300)
        p_hat[a, :, tau + 1] = 0.0
        for s in range(tau + 1):
            for col, u in enumerate((s - 1, s)):
                if u >= tau:
                    continue
                mu_hat[a, :, s, col] = b0 * L + b1 * L * s + (g0 + g1 * s) * cond_u[:, u + 1]
    return NuisanceFit(p_hat=p_hat, mu_hat=mu_hat, pi_hat=fit_propensity(dataset),
                       folds=np.zeros(n, dtype=int))
