import csv
import json

import numpy as np
import pytest

from pairlot.cli import KEYS, main
from pairlot.data import load_counterfactual_csv, load_csv, save_csv

from conftest import oracle_dataset


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_simulate_writes_data_and_manifest(tmp_path):
    code = main(["simulate", "--setting", "Setting1", "--n", "250", "--seed", "7",
                 "--out", str(tmp_path), "--counterfactuals"])
    assert code == 0
    data = load_csv(tmp_path / "data.csv")
    assert data.n == 250
    panel = load_counterfactual_csv(tmp_path / "data_counterfactual.csv")
    for a in (0, 1):
        rows = data.arm == a
        fact = panel.factual(np.full(data.n, a))
        assert np.array_equal(fact.ice_time[rows], data.ice_time[rows])
        np.testing.assert_array_equal(fact.outcomes[rows], data.outcomes[rows])
    info = json.loads((tmp_path / "data_manifest.json").read_text())
    assert info["config"]["dgp"]["seed"] == 7


def test_simulate_same_seed_same_bytes(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "--n", "40", "--seed", "3", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/data.csv").read_bytes() == (tmp_path / "b/data.csv").read_bytes()


def test_missing_config_exits_2(tmp_path, capsys):
    missing = tmp_path / "nope.toml"
    assert main(["simulate", "--config", str(missing), "--out", str(tmp_path)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_bad_config_keys_exit_2(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[dgp]\nsetting = 'Setting2'\nbogus = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--set", "dgp.n=1", "--out", str(tmp_path)]) == 2
    assert main(["simulate", "--set", "nodot=1", "--out", str(tmp_path)]) == 2


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[dgp]\nsetting = 'Setting3'\nn = 30\n")
    assert main(["simulate", "--config", str(cfg), "--set", "dgp.n=35", "--out", str(tmp_path)]) == 0
    data = load_csv(tmp_path / "data.csv")
    assert data.n == 35
    assert set(np.unique(data.outcomes[:, 0])) <= {0.0, 1.0}


def test_estimate_oracle_values(tmp_path):
    path = tmp_path / "oracle.csv"
    save_csv(oracle_dataset(), path)
    code = main(["estimate", "--data", str(path), "--methods", "PLOT_unadj,LOCF",
                 "--out", str(tmp_path)])
    assert code == 0
    rows = {r["requested"]: r for r in _rows(tmp_path / "results.csv")}
    assert float(rows["PLOT_unadj"]["point"]) == pytest.approx(1.75, abs=1e-12)
    assert float(rows["LOCF"]["point"]) == pytest.approx(1.0, abs=1e-12)
    assert (tmp_path / "results_manifest.json").exists()


def test_estimate_cplot_equals_plot_without_covariates(tmp_path):
    rng = np.random.default_rng(0)
    from conftest import random_dataset
    data = random_dataset(rng, 60, 3, 0)
    path = tmp_path / "d0.csv"
    save_csv(data, path)
    code = main(["estimate", "--data", str(path), "--methods", "PLOT_adj,CPLOT",
                 "--set", "learner.baseline_outcome=false", "--out", str(tmp_path)])
    assert code == 0
    rows = {r["requested"]: r for r in _rows(tmp_path / "results.csv")}
    assert float(rows["CPLOT"]["point"]) == pytest.approx(float(rows["PLOT_adj"]["point"]), abs=1e-10)


def test_estimate_errors(tmp_path):
    path = tmp_path / "oracle.csv"
    save_csv(oracle_dataset(), path)
    assert main(["estimate", "--data", str(path), "--methods", "PLOT_magic",
                 "--out", str(tmp_path)]) == 2
    assert main(["estimate", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 3
    # outcome recorded after the ICE: parses but fails validation
    text = path.read_text().splitlines()
    header = text[0].split(",")
    cells = text[2].split(",")
    cells[header.index("Y2")] = "1.5"
    text[2] = ",".join(cells)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(text) + "\n")
    assert main(["estimate", "--data", str(bad), "--out", str(tmp_path)]) == 3


def test_estimate_method_failure_exits_3(tmp_path, capsys):
    path = tmp_path / "oracle.csv"
    save_csv(oracle_dataset(), path)
    code = main(["estimate", "--data", str(path), "--methods", "LOCF,SURVIVORS",
                 "--out", str(tmp_path)])
    assert code == 3
    assert "SURVIVORS" in capsys.readouterr().err
    assert [r["requested"] for r in _rows(tmp_path / "results.csv")] == ["LOCF"]


def test_replicate_rejects_zero_replicates(tmp_path):
    assert main(["replicate", "--table", "1", "--R", "0", "--out", str(tmp_path)]) == 2
    assert main(["replicate", "--table", "3", "--params", "9,9,9", "--R", "1",
                 "--out", str(tmp_path)]) == 2


def test_replicate_small_run(tmp_path):
    code = main(["replicate", "--table", "3", "--params", "1,1,0", "--R", "2",
                 "--methods", "PLOT_unadj,LOCF", "--set", "dgp.n=60", "--out", str(tmp_path)])
    assert code == 0
    # table runs are named after the reference table
    for suffix in (".csv", ".md", "_replicates.csv", "_manifest.json", "_comparison.md",
                   "_estimates.png", "_coverage.png"):
        assert (tmp_path / f"table3_110{suffix}").exists(), suffix
    assert len(_rows(tmp_path / "table3_110.csv")) == 2


def test_replicate_table4(tmp_path):
    code = main(["replicate", "--table", "4", "--set", "experiment.n_large=20000",
                 "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "table4.md").exists()
    for s in ("Setting1", "Setting2", "Setting3"):
        rows = _rows(tmp_path / f"table4_{s}.csv")
        assert sum(float(r["A0_percent"]) for r in rows) == pytest.approx(100.0)
        assert (tmp_path / f"table4_{s}.png").exists()


def test_t_table(tmp_path, capsys):
    assert main(["t-table", "--setting", "Setting2", "--n-large", "20000", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "t_table_Setting2.csv").exists()
    assert main(["t-table", "--n-large", "10", "--out", str(tmp_path)]) == 2


def test_true_estimand(tmp_path):
    code = main(["true-estimand", "--setting", "Example", "--which", "PLOT",
                 "--n-oracle", "20000", "--set", "dgp.example_params=[1,1,1,0]",
                 "--out", str(tmp_path)])
    assert code == 0
    out = json.loads((tmp_path / "truth_PLOT_t5.json").read_text())
    assert "analytic" in out
    assert abs(out["value"] - out["analytic"]) < 5 * out["mc_se"] + 1e-3
    assert main(["true-estimand", "--which", "XYZ", "--out", str(tmp_path)]) == 2


def test_help_lists_every_key(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in KEYS:
        assert key in text
