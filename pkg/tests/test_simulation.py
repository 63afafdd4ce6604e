import json

import numpy as np
import pytest

from frailtyz.simulation import (ExperimentGrid, SimConfig, achieved_censoring,
                                 calibrate_censoring, generate_dataset, run_grid,
                                 write_grid_outputs)


def test_zero_frailty_variance():
    ds, z = generate_dataset(SimConfig(g=5, n_i=4, frailty_var=0.0),
                             np.random.default_rng(0), return_frailty=True)
    assert np.all(z == 1.0)


def test_zero_target_no_censoring():
    cfg = SimConfig(g=4, n_i=5)
    assert calibrate_censoring(cfg, 0.0) == 0.0
    assert generate_dataset(cfg, np.random.default_rng(0)).censoring_rate == 0.0


@pytest.mark.parametrize("target", [0.2, 0.5, 0.8])
def test_calibrated_rate_achieved(target):
    cfg = SimConfig(n_i=40)
    gamma = calibrate_censoring(cfg, target, rng=np.random.default_rng(1))
    assert abs(achieved_censoring(cfg, gamma, rng=np.random.default_rng(2)) - target) < 0.01


def test_covariate_distributions():
    ds = generate_dataset(SimConfig(g=100, n_i=100), np.random.default_rng(3))
    x1, x2, x3 = ds.covariates.T
    assert 0 <= x1.min() and x1.max() <= 1
    assert x2.min() > 0
    assert abs(x2.mean() - np.sqrt(2 / np.pi)) < 0.02
    assert abs(x3.mean() - 0.25) < 0.02


def test_frailty_moments():
    _, z = generate_dataset(SimConfig(g=20000, n_i=1), np.random.default_rng(4),
                            return_frailty=True)
    assert abs(z.mean() - 1) < 0.02 and abs(z.var() - 0.5) < 0.03


def test_uncalibrated_target_rejected():
    with pytest.raises(ValueError):
        generate_dataset(SimConfig(censor_rate_target=0.5), np.random.default_rng(0))


def test_grid_from_dict():
    g = ExperimentGrid.from_dict({"cluster_sizes": [10], "n_replicates": 3, "g": 8, "seed": 1})
    assert g.base.g == 8 and g.cluster_sizes == (10,)
    with pytest.raises(ValueError):
        ExperimentGrid.from_dict({"bogus": 1})
    assert ExperimentGrid.from_dict({"full_scale": True}).n_replicates == 1000


def test_uniform_pvalue_calibration():
    # a test that is uniform by construction rejects at 5% +- 3 binomial sd
    rng = np.random.default_rng(9)
    n = 2000
    rate = np.mean(rng.uniform(size=n) < 0.05)
    assert abs(rate - 0.05) <= 3 * np.sqrt(0.05 * 0.95 / n)


SMALL = ExperimentGrid(cluster_sizes=(10,), censor_targets=(0.0, 0.5), n_replicates=6,
                       base=SimConfig(g=10), save_datasets=1)


def test_grid_outputs(tmp_path):
    r = run_grid(SMALL, parallelism=1, seed=5, dataset_dir=tmp_path / "ds")
    write_grid_outputs(r, tmp_path)
    assert (tmp_path / "rejection_rates.csv").exists()
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["seed"] == 5 and len(man["cells"]) == 2
    assert len(list((tmp_path / "ds").glob("*.csv"))) == 2
    assert len(r.rows) == 2 * 2 * len(SMALL.tests)
    for row in r.rows:
        assert row["n_ok"] + row["n_failed"] == 6


def test_grid_deterministic_across_parallelism():
    a = run_grid(SMALL, parallelism=1, seed=3)
    b = run_grid(SMALL, parallelism=4, seed=3)
    assert a.to_csv() == b.to_csv()
    assert a.pvalues_csv() == b.pvalues_csv()
