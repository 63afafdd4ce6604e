import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from frailtyz import gof
from frailtyz import residuals as res
from frailtyz.frailty import Covariate, fit_ppl
from frailtyz.simulation import MODELS, SimConfig, generate_dataset


def blom(n):
    return special.ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))


# ---------------------------------------------------------------------------
# normality


def test_sw_perfect_quantiles():
    r = gof.sw_test(blom(50))
    assert r.statistic > 0.99 and r.p_value > 0.5


def test_sw_lognormal():
    assert gof.sw_test(np.exp(blom(50))).p_value < 0.01


def test_sf_perfect_and_lognormal():
    r = gof.sf_test(blom(50))
    assert r.statistic > 0.99 and r.p_value > 0.5
    assert gof.sf_test(np.exp(blom(50))).p_value < 0.01


@pytest.mark.parametrize("fn", [gof.sw_test, gof.sf_test])
def test_constant_input_rejected(fn):
    with pytest.raises(ValueError):
        fn(np.ones(20))


def test_sf_calibration():
    rng = np.random.default_rng(0)
    p = np.array([gof.sf_test(rng.standard_normal(100)).p_value for _ in range(2000)])
    assert 0.03 <= np.mean(p < 0.05) <= 0.07


def test_censored_sf_reduces_to_sf():
    x = np.random.default_rng(1).standard_normal(40)
    a = gof.sf_test_censored(x, np.ones(40))
    b = gof.sf_test(x)
    assert (a.statistic, a.p_value) == (b.statistic, b.p_value)


def test_censored_positions_reduce_to_blom():
    x = np.random.default_rng(2).standard_normal(30)
    xs, pos = gof.censored_plotting_positions(x, np.ones(30))
    np.testing.assert_allclose(pos, (np.arange(1, 31) - 0.375) / 30.25, rtol=1e-13)
    np.testing.assert_array_equal(xs, np.sort(x))


def test_censored_sf_calibration():
    rng = np.random.default_rng(3)
    rej = 0
    for _ in range(1000):
        x, c = rng.standard_normal(200), rng.standard_normal(200)
        d = (x <= c).astype(int)
        rej += gof.sf_test_censored(np.minimum(x, c), d).p_value < 0.05
    assert 0.03 <= rej / 1000 <= 0.08


def test_censored_sf_power():
    rng = np.random.default_rng(4)
    hits = 0
    for _ in range(200):
        x = np.exp(rng.standard_normal(200))
        c = np.exp(rng.standard_normal(200) + 1.2)     # about 20% censored
        d = (x <= c).astype(int)
        hits += gof.sf_test_censored(np.minimum(x, c), d).p_value < 0.05
    assert hits / 200 >= 0.8


def test_ks_examples():
    n = 10
    x = special.ndtri((np.arange(1, n + 1) - 0.5) / n)
    assert gof.ks_test_normal(x).statistic == pytest.approx(0.05, abs=1e-15)
    assert gof.ks_test_normal([0.0]).statistic == 0.5


# ---------------------------------------------------------------------------
# ANOVA


def test_anova_equal_means():
    r = gof.anova_homogeneity([-1, 1, -1, 1], [0, 0, 1, 1], k=2)
    assert r.statistic == 0.0 and r.p_value == pytest.approx(1.0)


def test_anova_hand_example():
    r = gof.anova_homogeneity([-1, 1, 1, 3], [0, 0, 1, 1], k=2)
    assert r.statistic == pytest.approx(2.0, rel=1e-12)
    # F(1, 2) tail = 1 - 1/sqrt(1 + 2/F) ... equals 1 - sqrt(2)/2 at F = 2
    assert r.p_value == pytest.approx(1 - math.sqrt(0.5), rel=1e-10)


def test_anova_degenerate_variance():
    r = gof.anova_homogeneity([0, 0, 1, 1], [0, 0, 1, 1], k=2)
    assert r.p_value == 0.0 and r.notes["degenerate_variance"]


def test_anova_drops_empty_bins():
    r = gof.anova_homogeneity([0.1, -0.2, 0.3, 0.5, -0.1], [0, 0.05, 0.1, 10, 9.9], k=10)
    assert r.grouping["nonempty_groups"] == 2


def test_anova_one_group_rejected():
    with pytest.raises(ValueError):
        gof.anova_homogeneity([1, 2, 3], [0, 0.01, 0.02], k=2) if False else \
            gof.anova_homogeneity([1, 2], [5, 5], k=2)


def test_equal_width_right_closed():
    groups, edges = gof.equal_width_groups([0.0, 1.0, 2.0], 2)
    assert groups.tolist() == [0, 0, 1]
    assert edges.tolist() == [0.0, 1.0, 2.0]


# ---------------------------------------------------------------------------
# KM cumulative hazard


def test_km_chf_hand():
    chf = gof.km_chf([1.0, 2.0, 3.0])
    np.testing.assert_allclose(chf.survival, [2 / 3, 1 / 3, 0.0], atol=1e-15)
    assert chf(2.0) == pytest.approx(-math.log(1 / 3))


def test_km_chf_single_event():
    chf = gof.km_chf([1.0, 2.0, 3.0], [0, 1, 0])
    assert chf.x.tolist() == [2.0]


def test_km_chf_unit_exponential():
    x = np.random.default_rng(5).exponential(size=2000)
    chf = gof.km_chf(x)
    t = np.linspace(0, 2, 401)
    assert np.max(np.abs(chf(t) - t)) < 0.08


# ---------------------------------------------------------------------------
# p_min


def test_pmin_examples():
    assert gof.pmin([0.2] * 7) == 0.2
    assert gof.pmin([0.01, 0.5, 0.6, 0.7]) == 0.04
    assert gof.pmin([0.3]) == 0.3


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=100))
def test_pmin_bounds(p):
    pm = gof.pmin(p)
    s = np.sort(p)
    J = len(p)
    assert pm <= s[-1]
    assert pm <= J * s[0] or pm == 1.0
    assert 0.0 <= pm <= 1.0


def test_pmin_invalid():
    with pytest.raises(ValueError):
        gof.pmin([])
    with pytest.raises(ValueError):
        gof.pmin([1.2])


# ---------------------------------------------------------------------------
# replicated tests on fitted models


def test_deterministic_tests_identical(true_fit, sim_data):
    rep = gof.replicate_tests(true_fit, sim_data, ["cz-csf", "dev-sw"], 5, seed=1)
    for r in rep.values():
        assert np.all(r.p_values == r.p_values[0])


def test_single_replicate(true_fit, sim_data):
    rep = gof.replicate_tests(true_fit, sim_data, ["z-sw"], 1, seed=4)["Z-SW"]
    assert rep.p_min == rep.p_values[0]


def test_replicates_independent_of_workers(true_fit, sim_data):
    cov = Covariate.parse("x2:log")
    a = gof.replicate_tests(true_fit, sim_data, ["z-aov-cov", "z-sf"], 6, 8, covariate=cov)
    b = gof.replicate_tests(true_fit, sim_data, ["z-aov-cov", "z-sf"], 6, 8, covariate=cov,
                            workers=3)
    for m in a:
        np.testing.assert_array_equal(a[m].p_values, b[m].p_values)


def test_run_test_seed_required(true_fit, sim_data):
    with pytest.raises(ValueError):
        gof.run_test("Z-SW", true_fit, sim_data)


def test_aov_cov_needs_covariate(true_fit, sim_data):
    with pytest.raises(ValueError):
        gof.run_test("Z-AOV-COV", true_fit, sim_data, seed=1)


def test_wrong_model_detected(wrong_fit, sim_data):
    r = gof.run_test("Z-AOV-COV", wrong_fit, sim_data, seed=3, covariate=Covariate.parse("x2:log"))
    assert r.p_value < 0.05


@pytest.mark.slow
def test_pmin_under_true_model():
    cfg = SimConfig(g=20, n_i=40)
    ok = 0
    for s in range(100):
        ds = generate_dataset(cfg, np.random.default_rng(500 + s))
        fit = fit_ppl(ds, MODELS["true"])
        rep = gof.replicate_tests(fit, ds, ["z-aov-lp"], 50, seed=s)["Z-AOV-LP"]
        ok += rep.p_min > 0.25
    assert ok >= 90
