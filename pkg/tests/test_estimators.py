import numpy as np
import pytest

from pairlot.data import TrialDataset
from pairlot.dgp import DgpConfig, Setting, generate
from pairlot.estimators import (EstimationError, cplot, marginal_nuisance, normal_quantile,
                                plot_adjusted, plot_unadj_fast, plot_unadj_pairwise,
                                ratio_estimand, wald_test)
from pairlot.learners import LearnerSpec
from pairlot.nuisance import fit_nuisance

from conftest import random_dataset

BARE = LearnerSpec(baseline_outcome=False)


def _strip(data):
    return TrialDataset(np.zeros((data.n, 0)), data.arm, data.ice_time, data.outcomes)


def test_pairwise_oracle(oracle):
    res = plot_unadj_pairwise(oracle, 2, n_boot=50, seed=1)
    assert res.point == pytest.approx(1.75, abs=1e-12)
    assert "percentile_ci" in res.extra and res.se > 0


def test_fast_oracle_bit_matches_pairwise(oracle):
    assert abs(plot_unadj_fast(oracle, 2).point - 1.75) < 1e-10


def test_no_ice_reduces_to_mean_difference():
    rng = np.random.default_rng(0)
    Y = rng.normal(size=(30, 4))
    A = np.r_[np.ones(15), np.zeros(15)].astype(int)
    data = TrialDataset(np.zeros((30, 0)), A, np.full(30, 3), Y)
    expected = Y[A == 1, 3].mean() - Y[A == 0, 3].mean()
    assert plot_unadj_fast(data, 3).point == pytest.approx(expected, abs=1e-12)
    assert plot_unadj_pairwise(data, 3, n_boot=2).point == pytest.approx(expected, abs=1e-12)


def test_fast_equals_pairwise_random():
    rng = np.random.default_rng(1)
    for _ in range(50):
        data = random_dataset(rng)
        t = int(rng.integers(0, data.tau + 1))
        fast = plot_unadj_fast(data, t).point
        pair = plot_unadj_pairwise(data, t, n_boot=2).point
        assert abs(fast - pair) < 1e-10


def test_reduction_chain_random():
    rng = np.random.default_rng(2)
    for _ in range(30):
        data = _strip(random_dataset(rng))
        t = int(rng.integers(0, data.tau + 1))
        fit = fit_nuisance(data, BARE, folds=1)
        fast = plot_unadj_fast(data, t)
        adj = plot_adjusted(data, fit, t)
        cond = cplot(data, fit, t)
        assert abs(adj.point - fast.point) < 1e-10
        assert abs(cond.point - fast.point) < 1e-10
        # the same influence function gives the same standard error
        assert abs(adj.se - fast.se) < 1e-10


@pytest.mark.parametrize("estimator", [plot_adjusted, cplot])
def test_if_mean_equals_point(estimator):
    data, _ = generate(DgpConfig(Setting.SETTING1, n=120, seed=3))
    fit = fit_nuisance(data, folds=5)
    res = estimator(data, fit)
    assert abs(res.if_contributions.mean() - res.point) < 1e-10
    assert abs(res.centered_if().mean()) < 1e-10
    z = normal_quantile(0.975)
    assert res.ci == pytest.approx((res.point - z * res.se, res.point + z * res.se), abs=1e-14)


def test_location_shift_invariance():
    data, _ = generate(DgpConfig(Setting.EXAMPLE, n=150, seed=4))
    shifted = data.with_outcomes(data.filled_outcomes() + 3.7)
    fit = fit_nuisance(data, folds=1)
    fit2 = fit_nuisance(shifted, folds=1)
    assert abs(plot_unadj_fast(shifted).point - plot_unadj_fast(data).point) < 1e-10
    for est in (plot_adjusted, cplot):
        assert abs(est(shifted, fit2).point - est(data, fit).point) < 1e-8


def test_truncation_inactive_when_everyone_survives_past_t():
    data = random_dataset(np.random.default_rng(5), n=80, tau=5, d=1)
    T = np.maximum(data.ice_time, 3)
    Y = np.random.default_rng(6).normal(size=(80, 6))
    data = TrialDataset(data.covariates, data.arm, T,
                        np.where(np.arange(6)[None, :] <= T[:, None], Y, np.nan))
    # with all T >= 3 the estimand at t=3 only uses visit 3
    expected = Y[data.arm == 1, 3].mean() - Y[data.arm == 0, 3].mean()
    assert abs(plot_unadj_fast(data, 3).point - expected) < 1e-12


def test_ratio_oracle(oracle):
    fit = marginal_nuisance(oracle)
    res = ratio_estimand(oracle, fit, 2, "PLOT")
    assert res.extra["numerator"] == pytest.approx(3.75, abs=1e-12)
    assert res.extra["denominator"] == pytest.approx(2.0, abs=1e-12)
    assert res.point == pytest.approx(1.875, abs=1e-12)
    assert abs(res.if_contributions.mean() - res.point) < 1e-12


def test_ratio_denominator_guard(oracle):
    y = np.array(oracle.outcomes)
    y[2:] = np.where(np.isnan(y[2:]), np.nan, 0.0)
    data = TrialDataset(oracle.covariates, oracle.arm, oracle.ice_time, y)
    with pytest.raises(EstimationError, match="denominator below threshold"):
        ratio_estimand(data, marginal_nuisance(data), 2)


def test_ratio_null_is_one():
    cfg = DgpConfig(Setting.EXAMPLE, n=4000, example_params=(1, 0, 0, 0), ice_arm_scale=0.0, seed=7)
    data, _ = generate(cfg)
    data = data.with_outcomes(data.filled_outcomes() + 10.0)
    res = ratio_estimand(data, fit_nuisance(data, folds=2), which="CPLOT")
    assert abs(res.point - 1.0) < 4 * res.se


def test_cplot_equals_plot_without_covariates():
    data = _strip(random_dataset(np.random.default_rng(8), n=90, tau=4))
    fit = fit_nuisance(data, BARE, folds=1)
    assert abs(cplot(data, fit).point - plot_adjusted(data, fit).point) < 1e-10


def test_wald_examples(oracle):
    res = plot_unadj_fast(oracle, 2)
    res.point, res.se = 0.0, 1.0
    assert wald_test(res, 0.0) == (0.0, 1.0)
    res.point = 1.959963984540054
    assert wald_test(res)[1] == pytest.approx(0.05, abs=1e-9)
    res.se = 0.0
    with pytest.raises(EstimationError):
        wald_test(res)


def test_horizon_errors(oracle):
    with pytest.raises(EstimationError):
        plot_unadj_pairwise(oracle, 3)
    with pytest.raises(EstimationError):
        plot_unadj_fast(oracle, -1)


def test_nonfinite_nuisance_rejected():
    data, _ = generate(DgpConfig(Setting.EXAMPLE, n=40, seed=9))
    fit = fit_nuisance(data, folds=1)
    mu = fit.mu_hat.copy()
    mu[0, 0, 1, 0] = np.nan
    from dataclasses import replace
    with pytest.raises(EstimationError):
        plot_adjusted(data, replace(fit, mu_hat=mu))


def test_nonparametric_variant_accepts_vector_propensity():
    from dataclasses import replace
    data, _ = generate(DgpConfig(Setting.EXAMPLE, n=100, seed=10))
    fit = fit_nuisance(data, folds=1)
    vec = replace(fit, pi_hat=np.full(100, fit.pi_hat))
    a = plot_adjusted(data, fit, variant="semiparametric").point
    b = plot_adjusted(data, vec, variant="nonparametric").point
    assert abs(a - b) < 1e-12
    with pytest.raises(EstimationError):
        plot_adjusted(data, fit, variant="other")


def test_result_row(oracle):
    row = plot_unadj_fast(oracle, 2).to_row()
    assert list(row) == ["estimand_id", "t", "point", "se", "ci_lo", "ci_hi", "n_used", "method"]
    assert float(row["point"]) == pytest.approx(1.75)
