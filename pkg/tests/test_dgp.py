import numpy as np
import pytest

from pairlot.data import validate
from pairlot.dgp import (DgpConfig, Setting, example_oracle_nuisance, generate,
                         t_distribution_table, true_estimand)

SETTINGS = [Setting.SETTING1, Setting.SETTING2, Setting.SETTING3, Setting.EXAMPLE]


@pytest.mark.parametrize("setting", SETTINGS)
def test_determinism(setting):
    cfg = DgpConfig(setting, n=60, seed=11)
    a, pa = generate(cfg)
    b, pb = generate(cfg)
    assert a.equals(b)
    assert np.array_equal(pa.outcomes[1], pb.outcomes[1])
    c, _ = generate(cfg, seed=12)
    assert not c.equals(a)


@pytest.mark.parametrize("setting", SETTINGS)
def test_consistency_link_and_validity(setting):
    data, panel = generate(DgpConfig(setting, n=200, seed=5))
    assert validate(data).ok
    A = data.arm
    for i in range(data.n):
        a = A[i]
        T = panel.ice_time[a][i]
        assert data.ice_time[i] == T
        assert np.array_equal(data.outcomes[i, :T + 1], panel.outcomes[a][i, :T + 1])
        assert np.all(np.isnan(data.outcomes[i, T + 1:]))
    assert data.equals(panel.factual(A))


def test_setting3_binary_outcomes():
    _, panel = generate(DgpConfig(Setting.SETTING3, n=500, seed=2))
    for a in (0, 1):
        assert set(np.unique(panel.outcomes[a]).tolist()) <= {0.0, 1.0}
        assert np.all(panel.outcomes[a][:, 0] == 0)


def test_setting2_no_ice_at_baseline():
    data, panel = generate(DgpConfig(Setting.SETTING2, n=5000, seed=2))
    assert data.d == 0
    assert panel.ice_time[0].min() >= 1 and panel.ice_time[1].min() >= 1


def test_example_constant_trajectories_without_time_terms():
    cfg = DgpConfig(Setting.EXAMPLE, n=50, example_params=(1.5, 0, 0, 0), noise_sd=0.0,
                    unmeasured_sd=0.0, seed=1)
    data, panel = generate(cfg)
    for a in (0, 1):
        y = panel.outcomes[a]
        assert np.allclose(y, 1.5 * panel.covariates[:, [0]])


@pytest.mark.parametrize("setting", [Setting.SETTING1, Setting.SETTING2, Setting.SETTING3])
def test_t_table_columns_sum_to_100(setting):
    table = t_distribution_table(DgpConfig(setting), n_large=20_000, seed=1)
    assert table.shape == (6, 2)
    assert np.allclose(table.sum(axis=0), 100.0)


def test_t_table_requires_large_sample():
    with pytest.raises(ValueError):
        t_distribution_table(DgpConfig(Setting.SETTING1), n_large=100)


def test_setting2_t_table_matches_reference_cells():
    table = t_distribution_table(DgpConfig(Setting.SETTING2), n_large=100_000, seed=3)
    assert table[0].tolist() == [0.0, 0.0]
    assert abs(table[5, 1] - 18) <= 1.5


def test_identical_arms_give_zero_estimands():
    cfg = DgpConfig(Setting.EXAMPLE, example_params=(1, 1, 1, 1), ice_arm_scale=0.0)
    for which in ("PLOT", "CPLOT"):
        v = true_estimand(cfg, which, n_oracle=200_000, seed=4)
        assert abs(v.value) < 3.5 * v.mc_se + 1e-12


def test_example_null_plot_is_zero():
    v = true_estimand(DgpConfig(Setting.EXAMPLE, example_params=(1, 0, 1, 0)), "PLOT",
                      n_oracle=200_000, seed=1)
    assert abs(v.value) < 3.5 * v.mc_se


def test_example_110_cplot_zero_plot_not():
    cfg = DgpConfig(Setting.EXAMPLE, example_params=(1, 1, 1, 0))
    plot = true_estimand(cfg, "PLOT", n_oracle=200_000, seed=2)
    cond = true_estimand(cfg, "CPLOT", n_oracle=200_000, seed=2)
    assert abs(cond.value) < 3.5 * cond.mc_se
    assert plot.value < -0.3 and abs(plot.value) > 10 * plot.mc_se


@pytest.mark.parametrize("kwargs", [dict(p_treat=0.0), dict(p_treat=1.0), dict(n=1), dict(tau=0),
                                    dict(setting="Setting9"), dict(example_params=(1, float("nan"), 0, 0))])
def test_config_errors(kwargs):
    with pytest.raises(ValueError):
        DgpConfig(**{"setting": Setting.EXAMPLE, **kwargs})


def test_setting_aliases():
    assert Setting.parse("2") is Setting.SETTING2
    assert Setting.parse("example") is Setting.EXAMPLE


def test_example_oracle_nuisance_is_well_formed():
    cfg = DgpConfig(Setting.EXAMPLE, n=100, example_params=(1, 1, 1, 1), seed=3)
    data, _ = generate(cfg)
    fit = example_oracle_nuisance(cfg, data)
    assert fit.check() == []


def test_example_oracle_survival_matches_simulation():
    cfg = DgpConfig(Setting.EXAMPLE, n=400_000, seed=9)
    data, panel = generate(cfg)
    fit = example_oracle_nuisance(cfg, data.subset(np.arange(4000)))
    # averaging the conditional survival over L recovers the marginal
    for a in (0, 1):
        for s in range(5):
            emp = np.mean(panel.ice_time[a] > s)
            assert abs(fit.p(a, s).mean() - emp) < 0.02
