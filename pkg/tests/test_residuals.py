import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frailtyz import residuals as res
from frailtyz._seeding import derive_seed, record_uniforms
from frailtyz.data import SurvivalDataset
from frailtyz.frailty import ModelSpec, fit_ppl

mpmath.mp.dps = 40


@pytest.mark.parametrize("x", [-8.0, -3.3, -1.96, -0.5, 0.0, 0.7, 1.5, 4.0, 7.5])
def test_norm_cdf_against_mpmath(x):
    ref = float(mpmath.ncdf(x))
    assert res.norm_cdf(x) == pytest.approx(ref, rel=1e-10)


@pytest.mark.parametrize("p", [1e-12, 1e-6, 0.01, 0.3, 0.5, 0.8, 0.999, 1 - 1e-9])
def test_norm_ppf_against_mpmath(p):
    mp = mpmath.mpf(p)
    ref = float(-mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mp))
    got = res.norm_ppf(p)
    assert got == pytest.approx(ref, rel=1e-10, abs=1e-15)


def test_deviance_examples():
    np.testing.assert_allclose(res.deviance_values([0.0, -1.0], [1, 0]), [0.0, -math.sqrt(2)])


def test_deviance_error_names_record():
    with pytest.raises(FloatingPointError, match="index 1"):
        res.deviance_values([0.2, 1.0], [1, 1])


def test_martingale_is_status_minus_cox_snell(true_fit, sim_data):
    cs = res.cox_snell(true_fit, sim_data).values
    np.testing.assert_array_equal(res.martingale(true_fit, sim_data).values, sim_data.status - cs)


def test_randomize_branches():
    s = np.array([0.3, 0.8])
    rid = np.array([4, 9])
    u = record_uniforms(11, rid)
    out = res.randomize(s, [1, 0], 11, rid)
    assert out[0] == 0.3
    assert out[1] == pytest.approx(u[1] * 0.8)


def test_z_examples():
    z, _ = res._clamped_z(np.array([0.5, float(res.norm_cdf(-1.96))]))
    assert z[0] == 0.0
    assert z[1] == pytest.approx(1.96, rel=1e-12)


def test_clamp_counts():
    z, n = res._clamped_z(np.array([0.0, 1.0, 0.5]))
    assert n == 2
    assert np.all(np.isfinite(z))


def test_cox_snell_identity_null_model():
    ds = SurvivalDataset([1, 2, 3, 4], [1, 0, 1, 1], ["a", "a", "b", "b"])
    fit = fit_ppl(ds, ModelSpec((), frailty=False))
    cs = res.cox_snell(fit, ds).values
    np.testing.assert_allclose(cs, [1 / 4, 1 / 4, 1 / 4 + 1 / 2, 1 / 4 + 1 / 2 + 1])
    np.testing.assert_allclose(res.censored_z(fit, ds).values, -res.norm_ppf(np.exp(-cs)))
    np.testing.assert_allclose(res.martingale(fit, ds).values, ds.status - cs)


def test_z_reproducible(true_fit, sim_data):
    a = res.z_residual(true_fit, sim_data, 42).values
    b = res.z_residual(true_fit, sim_data, 42).values
    c = res.z_residual(true_fit, sim_data, 43).values
    np.testing.assert_array_equal(a, b)
    ev = sim_data.status == 1
    np.testing.assert_array_equal(a[ev], c[ev])
    assert not np.array_equal(a[~ev], c[~ev])


def test_z_subset_invariance(true_fit, sim_data):
    mask = np.arange(len(sim_data)) % 3 == 0
    mask[np.flatnonzero(sim_data.status == 1)[0]] = True
    full = res.z_residual(true_fit, sim_data, 9).values
    sub = res.z_residual(true_fit, sim_data.subset(mask), 9).values
    np.testing.assert_array_equal(full[mask], sub)


def test_censored_records_below_event_value(true_fit, sim_data):
    # U*S <= S so Z >= censored-Z
    z = res.z_residual(true_fit, sim_data, 5).values
    cz = res.censored_z(true_fit, sim_data).values
    assert np.all(z >= cz - 1e-12)


def test_residual_csv_roundtrip(tmp_path, true_fit, sim_data):
    r = res.z_residual(true_fit, sim_data, 3)
    r.to_csv(tmp_path / "z.csv")
    back = res.ResidualSet.from_csv(tmp_path / "z.csv")
    np.testing.assert_array_equal(back.values, r.values)
    assert back.seed == 3
    assert back.clusters == r.clusters


def test_compute_requires_seed_for_z(true_fit, sim_data):
    with pytest.raises(ValueError):
        res.compute("z", true_fit, sim_data)
    assert res.compute("cs", true_fit, sim_data).kind == "cox_snell"


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.lists(st.integers(0, 2**62), min_size=1, max_size=50))
def test_record_uniforms_open_interval(seed, ids):
    u = record_uniforms(seed, ids)
    assert np.all((u > 0) & (u < 1))
    np.testing.assert_array_equal(u, record_uniforms(seed, ids))


def test_record_uniforms_look_uniform():
    from scipy import stats
    u = record_uniforms(derive_seed(1, 2), np.arange(100_000))
    assert stats.kstest(u, "uniform").pvalue > 1e-3
