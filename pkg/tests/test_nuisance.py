import numpy as np
import pytest

from pairlot.data import TrialDataset
from pairlot.dgp import DgpConfig, Setting, generate
from pairlot.learners import GLMLearner, LearnerSpec
from pairlot.nuisance import (NuisanceFit, adjustment_set, corrupt, fit_nuisance,
                              fit_outcome_means, fit_propensity, fit_survival, make_folds,
                              with_propensity)

from conftest import random_dataset

BARE = LearnerSpec(baseline_outcome=False)


def _strip(data):
    return TrialDataset(np.zeros((data.n, 0)), data.arm, data.ice_time, data.outcomes)


def test_survival_without_covariates_is_sample_proportion():
    rng = np.random.default_rng(0)
    for _ in range(10):
        data = _strip(random_dataset(rng))
        p = fit_survival(data, BARE, folds=1)
        for a in (0, 1):
            T = data.ice_time[data.arm == a]
            for s in range(data.tau + 1):
                assert np.allclose(p[a, :, s + 1], np.mean(T > s), atol=1e-12, rtol=0)
            assert np.all(p[a, :, 0] == 1.0)


def test_survival_without_covariates_cross_fitted_uses_training_folds():
    data = _strip(random_dataset(np.random.default_rng(1), n=120, tau=4))
    folds = make_folds(data, 3, seed=0)
    p = fit_survival(data, BARE, folds=folds)
    for f in range(3):
        train = folds != f
        i = np.flatnonzero(folds == f)[0]
        T = data.ice_time[train & (data.arm == 1)]
        assert abs(p[1, i, 3] - np.mean(T > 2)) < 1e-12


def test_outcome_means_without_covariates_are_stratum_means():
    rng = np.random.default_rng(2)
    for _ in range(10):
        data = _strip(random_dataset(rng))
        mu = fit_outcome_means(data, BARE, folds=1)
        Y, T, A = data.filled_outcomes(), data.ice_time, data.arm
        for a in (0, 1):
            for s in range(data.tau + 1):
                for col, u in enumerate((s - 1, s)):
                    rows = (A == a) & (T > u)
                    if u >= data.tau or not rows.any():
                        continue
                    assert np.allclose(mu[a, :, s, col], Y[rows, s].mean(), atol=1e-12, rtol=0)


def test_no_events_gives_full_survival():
    data = random_dataset(np.random.default_rng(3), n=80, tau=3, d=2)
    data = TrialDataset(data.covariates, data.arm, np.full(80, 3),
                        np.random.default_rng(0).normal(size=(80, 4)))
    p = fit_survival(data, folds=5)
    assert np.allclose(p[:, :, 1:4], 1.0)
    assert np.all(p[:, :, 4] == 0.0)


def test_constant_outcome_gives_constant_means():
    data = random_dataset(np.random.default_rng(4), n=100, tau=4, d=2)
    data = data.with_outcomes(np.full((100, 5), 2.5))
    mu = fit_outcome_means(data, folds=5)
    assert np.allclose(mu[:, :, :4, :], 2.5, atol=1e-10)


def test_example_linear_mean_recovered_by_ridge():
    cfg = DgpConfig(Setting.EXAMPLE, n=2000, noise_sd=0.0, seed=6)
    data, _ = generate(cfg)
    X = data.covariates
    rows = data.ice_time > 1
    learner = GLMLearner(alpha=1.0).fit(X[rows], data.outcomes[rows, 2])
    coef = learner.beta_[0] / learner.scale_[0]
    assert abs(coef - 1.0) < 0.05


def test_propensity_examples():
    make = lambda A: TrialDataset(np.zeros((len(A), 0)), A, [0] * len(A), [[1.0]] * len(A))
    assert fit_propensity(make([1, 0, 1, 0])) == 0.5
    assert fit_propensity(make([1, 1, 1, 0])) == 0.75
    with pytest.raises(ValueError):
        fit_propensity(make([1, 1, 1]))


def test_propensity_concentration():
    rng = np.random.default_rng(7)
    hits = 0
    for k in range(200):
        data, _ = generate(DgpConfig(Setting.SETTING2, n=250, seed=k))
        hits += abs(fit_propensity(data) - 0.5) <= 0.1
    assert hits == 200


@pytest.mark.parametrize("setting", [Setting.SETTING1, Setting.SETTING2, Setting.SETTING3, Setting.EXAMPLE])
def test_fit_invariants(setting):
    data, _ = generate(DgpConfig(setting, n=150, seed=8))
    fit = fit_nuisance(data, folds=5, seed=1)
    assert fit.check() == []
    assert np.all(np.diff(fit.p_hat, axis=2) <= 1e-12)
    assert sorted(np.unique(fit.folds).tolist()) == [0, 1, 2, 3, 4]


def test_folds_are_stratified():
    data, _ = generate(DgpConfig(Setting.SETTING1, n=250, seed=9))
    folds = make_folds(data, 5, seed=3)
    for f in range(5):
        members = folds == f
        assert 0 < data.arm[members].mean() < 1
        assert abs(members.sum() - 50) <= 2


def test_out_of_fold_canary():
    """A duplicated outlier must not be predicted from its own outcome."""
    cfg = DgpConfig(Setting.EXAMPLE, n=200, seed=10)
    data, _ = generate(cfg)
    Y = data.outcomes.copy()
    i = int(np.flatnonzero((data.ice_time == data.tau) & (data.arm == 1))[0])
    Y[i, :] = 1000.0
    folds = make_folds(data, 5, seed=0)
    spec = LearnerSpec(library=["glm"], baseline_outcome=False)
    fit = fit_nuisance(data.with_outcomes(Y), spec, folds=folds)
    own = fit.mu(1, data.tau, data.tau - 1)[i]
    assert abs(own - 1000.0) > 100
    # the in-sample fit, in contrast, leans towards the outlier
    full = fit_nuisance(data.with_outcomes(Y), spec, folds=1)
    assert full.mu(1, data.tau, data.tau - 1)[i] > own


def test_baseline_outcome_carried_forward():
    data, _ = generate(DgpConfig(Setting.SETTING2, n=120, seed=11))
    fit = fit_nuisance(data, folds=5)
    for a in (0, 1):
        assert np.array_equal(fit.mu(a, 0, -1), data.outcomes[:, 0])
    assert adjustment_set(data, LearnerSpec()).shape == (120, 1)


def test_setting3_survival_matches_population():
    cfg = DgpConfig(Setting.SETTING3, n=5000, seed=12)
    data, _ = generate(cfg)
    fit = fit_nuisance(data, folds=1)
    big, panel = generate(cfg.replace(n=1_000_000), seed=99)
    assert abs(fit.p(1, 4).mean() - np.mean(panel.ice_time[1] > 4)) < 0.02


def test_empty_stratum_falls_back(caplog):
    data = random_dataset(np.random.default_rng(13), n=40, tau=3, d=1)
    T = np.where(data.arm == 0, 0, data.ice_time)
    data = TrialDataset(data.covariates, data.arm, T,
                        np.where(np.arange(4)[None, :] <= T[:, None], data.filled_outcomes(), np.nan))
    fit = fit_nuisance(data, folds=2, seed=0)
    assert np.all(np.isfinite(fit.mu_hat))
    assert np.allclose(fit.p_hat[0, :, 1:], 0.0)


@pytest.mark.parametrize("mode", ["constant", "noisy"])
def test_corrupt_keeps_invariants(mode):
    data, _ = generate(DgpConfig(Setting.EXAMPLE, n=100, seed=14))
    fit = fit_nuisance(data, folds=1)
    bad = corrupt(fit, mode, seed=3)
    assert bad.check() == []
    assert bad.pi_hat == fit.pi_hat
    assert not np.allclose(bad.mu_hat, fit.mu_hat)
    with pytest.raises(ValueError):
        corrupt(fit, "scramble")


def test_with_propensity():
    data, _ = generate(DgpConfig(Setting.EXAMPLE, n=50, seed=15))
    fit = with_propensity(fit_nuisance(data, folds=1), 0.9)
    assert fit.pi_hat == 0.9


def test_fit_dump(tmp_path):
    data = random_dataset(np.random.default_rng(16), n=10, tau=2, d=1)
    fit = fit_nuisance(data, folds=1)
    fit.to_csv(tmp_path / "fit.csv")
    lines = (tmp_path / "fit.csv").read_text().splitlines()
    assert lines[0].startswith("subject,fold,a,s,u")
    assert len(lines) == 1 + 10 * 2 * 5
