import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from subspace_margins.datasets import T1Params
from subspace_margins.theory import (XiLawParams, chi2_cdf, distribution_compare, ks_statistic,
                                     regularized_lower_gamma, theory_report, xi2_empirical, xi2_law)

scipy_stats = pytest.importorskip("scipy.stats")


def test_law_default_values():
    law = xi2_law(XiLawParams())
    assert law["scale"] == pytest.approx(4e-6, rel=1e-12)
    assert law["median"] == pytest.approx(4e-6 * 3 * (1 - 2 / 27) ** 3, rel=1e-12)
    assert law["median"] == pytest.approx(9.526e-6, rel=1e-3)
    assert law["variance"] == pytest.approx(9.6e-11, rel=1e-12)


def test_law_rejects_degenerate_params():
    for bad in (dict(n_samples=0), dict(epsilon=0.0), dict(sigma=0.0), dict(subspace_dim=0)):
        with pytest.raises(ValueError):
            XiLawParams(**bad)


@pytest.mark.parametrize("S", range(1, 11))
def test_wilson_hilferty_median_close_to_exact(S):
    approx = S * (1 - 2 / (9 * S)) ** 3
    assert 0.48 <= chi2_cdf(approx, S) <= 0.52
    assert abs(approx - scipy_stats.chi2.median(S)) <= 0.05 * scipy_stats.chi2.median(S)


@given(st.integers(1, 40), st.floats(0.0, 120.0))
def test_chi2_cdf_matches_scipy(df, x):
    assert chi2_cdf(x, df) == pytest.approx(scipy_stats.chi2.cdf(x, df), abs=1e-9)


def test_regularized_gamma_edges():
    assert regularized_lower_gamma(2.0, 0.0) == 0.0
    assert regularized_lower_gamma(1.0, 1.0) == pytest.approx(1 - np.exp(-1), abs=1e-12)
    assert regularized_lower_gamma(3.0, 1e4) == 1.0
    with pytest.raises(ValueError):
        regularized_lower_gamma(0.0, 1.0)


def test_ks_cases():
    rng = np.random.default_rng(0)
    cdf = lambda v: chi2_cdf(v, 3)
    assert ks_statistic(rng.chisquare(3, 5000), cdf) < 0.02
    assert ks_statistic(np.full(100, 2.366), cdf) >= 0.5
    assert distribution_compare(rng.chisquare(3, 2000) * 10, 1.0, 3)["ks_statistic"] > 0.3
    ref = scipy_stats.kstest(v := rng.chisquare(2, 300), "chi2", args=(2,)).statistic
    assert ks_statistic(v, lambda z: chi2_cdf(z, 2)) == pytest.approx(ref, abs=1e-9)
    with pytest.raises(ValueError):
        ks_statistic([], cdf)


SMALL = T1Params(epsilon=5.0, sigma=1.0, n_samples=400, dim=20, seed=0)


def test_observation_invariance():
    s = xi2_empirical(SMALL, 3, reps=5, seed=1, observations=6)
    assert s.values.shape == (5,) and np.all(s.values > 0)


def test_sigma_zero_is_degenerate():
    r = theory_report(T1Params(5.0, 0.0, 200, 10, 0), 2, reps=5)
    assert r["degenerate"] and r["pass"] and r["ks_statistic"] is None


def test_single_sample_discards_reps():
    s = xi2_empirical(T1Params(5.0, 1.0, 1, 10, 0), 2, reps=6)
    assert s.n_discarded == 6 and s.values.size == 0


def test_empirical_moments_follow_law():
    r = theory_report(SMALL, 3, reps=2000, seed=3, return_sample=True)
    law = r["closed_form"]
    assert r["pass"] and r["ks_statistic"] <= 0.08
    assert abs(r["empirical"]["variance"] - law["variance"]) <= 0.4 * law["variance"]
    assert r["sample"].size == 2000


def test_misspecified_reference_fails():
    r = theory_report(SMALL, 3, reps=300, seed=4, reference_epsilon=5.0 / np.sqrt(10))
    assert not r["pass"] and r["ks_statistic"] > 0.3


def test_reproducible():
    a = xi2_empirical(SMALL, 2, reps=4, seed=9).values
    b = xi2_empirical(SMALL, 2, reps=4, seed=9).values
    assert np.array_equal(a, b)
