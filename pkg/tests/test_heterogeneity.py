import json
import math
import warnings

import numpy as np
import pytest

from triangulate.errors import SingularCovarianceWarning, ZeroVariance
from triangulate.estimators import EstimatorOptions
from triangulate.heterogeneity import (
    NOT_SIMILAR,
    SIMILAR,
    all_subsets,
    bootstrap_ensemble,
    chi2_quantile,
    chi2_sf,
    decide,
    ensemble_from_replicates,
    ivw_pool,
    q_from_parts,
    q_statistic,
    write_q_tests,
)

import oracles
from conftest import make_cohort


# -- chi-square -------------------------------------------------------------


@pytest.mark.parametrize("df,level,expected", [(1, 0.95, 3.841), (3, 0.95, 7.815), (4, 0.95, 9.488)])
def test_tabulated_critical_values(df, level, expected):
    assert round(chi2_quantile(df, level), 3) == expected


@pytest.mark.parametrize("x", [0.0, 0.1, 1.0, 3.3, 10.0, 55.5])
def test_df2_survival_is_exponential(x):
    assert chi2_sf(2, x) == pytest.approx(math.exp(-x / 2), rel=1e-14, abs=1e-300)


@pytest.mark.parametrize("df", range(1, 11))
def test_quantile_round_trip(df):
    for level in (0.01, 0.5, 0.9, 0.95, 0.999):
        q = chi2_quantile(df, level)
        assert 1 - chi2_sf(df, q) == pytest.approx(level, abs=1e-9)


@pytest.mark.parametrize("df", [1, 2, 3, 5, 9])
@pytest.mark.parametrize("x", [0.2, 1.0, 4.0, 12.0, 60.0])
def test_survival_matches_series_oracle(df, x):
    assert chi2_sf(df, x) == pytest.approx(oracles.chi2_sf_series(df, x), rel=1e-10, abs=1e-15)


def test_quantile_matches_bisection_oracle():
    for df in (1, 3, 4, 7):
        assert chi2_quantile(df, 0.95) == pytest.approx(oracles.chi2_quantile_bisect(df, 0.95), abs=1e-9)


def test_invalid_chi2_arguments():
    with pytest.raises(ValueError):
        chi2_quantile(0, 0.5)
    with pytest.raises(ValueError):
        chi2_quantile(1, 1.0)


# -- pooling ----------------------------------------------------------------


def test_ivw_examples():
    assert ivw_pool([0.1, 0.3, 0.5], [2, 2, 2]) == pytest.approx(0.3)
    assert ivw_pool([0.1, 0.3], [1, 1e9]) == pytest.approx(0.1, abs=1e-8)
    assert ivw_pool([0.2, 0.4], [1, 3]) == pytest.approx(0.25, abs=1e-15)


def test_ivw_zero_variance():
    with pytest.raises(ZeroVariance):
        ivw_pool([0.1, 0.2], [1.0, 0.0])


# -- Q statistic ------------------------------------------------------------


def test_equal_estimates_give_zero():
    cov = np.array([[2.0, 0.5, 0.1], [0.5, 1.0, 0.2], [0.1, 0.2, 3.0]])
    r = q_from_parts([0.3, 0.3, 0.3], cov)
    assert r.q == 0.0 and r.decision == SIMILAR and r.df == 2


def test_identity_covariance_example():
    r = q_from_parts([0.0, 1.0], np.eye(2))
    assert r.ivw_pooled == pytest.approx(0.5)
    assert r.q == pytest.approx(0.5, abs=1e-15)
    assert r.decision == SIMILAR


def test_tabulated_decision():
    crit, p, decision = decide(10.58, 1)
    assert round(crit, 3) == 3.841
    assert decision == NOT_SIMILAR
    assert p < 0.01


def test_decision_boundary_is_strict():
    crit = chi2_quantile(1, 0.95)
    assert decide(crit, 1)[2] == SIMILAR
    assert decide(np.nextafter(crit, np.inf), 1)[2] == NOT_SIMILAR


def test_cochran_reduction():
    rng = np.random.default_rng(0)
    for _ in range(200):
        b = rng.normal(size=2)
        v = rng.uniform(0.01, 2.0, size=2)
        r = q_from_parts(b, np.diag(v))
        assert r.q == pytest.approx((b[0] - b[1]) ** 2 / (v[0] + v[1]), rel=1e-12, abs=1e-15)


def test_order_invariance():
    rng = np.random.default_rng(1)
    A = rng.normal(size=(4, 4))
    cov = A @ A.T + 0.1 * np.eye(4)
    b = rng.normal(size=4)
    base = q_from_parts(b, cov).q
    for _ in range(10):
        perm = rng.permutation(4)
        assert q_from_parts(b[perm], cov[np.ix_(perm, perm)]).q == pytest.approx(base, rel=1e-10)


def test_singular_covariance_falls_back_with_warning():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.warns(SingularCovarianceWarning):
        r = q_from_parts([0.1, 0.2], cov)
    assert np.isfinite(r.q)


def test_single_estimate_rejected():
    with pytest.raises(ValueError):
        q_from_parts([0.1], [[1.0]])


def test_all_subsets_and_writer(tmp_path):
    subsets = all_subsets(["CaT", "IV_TSLS", "DiD"])
    assert len(subsets) == 4
    res = [q_from_parts([0.1, 0.2], np.eye(2) * 0.01, methods=s) for s in subsets[:1]]
    write_q_tests(res, tmp_path / "q.csv", tmp_path / "q.json")
    lines = (tmp_path / "q.csv").read_text().splitlines()
    assert lines[0] == "set,Q,critical,df,p,decision"
    assert lines[1].startswith('"CaT, IV_TSLS",0.5,3.841,1,')
    assert json.loads((tmp_path / "q.json").read_text())[0]["decision"] == SIMILAR


# -- bootstrap ensemble -----------------------------------------------------


def test_singleton_ensemble_variance():
    c = make_cohort(150, seed=2)
    ens = bootstrap_ensemble(c, ["CaT"], B=40, seed=3)
    assert ens.covariance.shape == (1, 1)
    assert ens.covariance[0, 0] == pytest.approx(ens.replicates[:, 0].var(ddof=1))


def test_duplicate_method_is_perfectly_correlated():
    c = make_cohort(150, seed=2)
    ens = bootstrap_ensemble(c, ["CaT", "cat"], B=40, seed=3)
    assert ens.correlation[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_ensemble_covariance_is_symmetric_psd():
    c = make_cohort(250, seed=5)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ens = bootstrap_ensemble(c, ["CaT", "IV_TSLS", "DiD"], B=60, seed=1, options=EstimatorOptions(se_method="analytic"))
    np.testing.assert_allclose(ens.covariance, ens.covariance.T, atol=1e-15)
    assert np.linalg.eigvalsh(ens.covariance).min() > -1e-8


def test_ensemble_is_bit_reproducible():
    c = make_cohort(120, seed=4)
    a = bootstrap_ensemble(c, ["CaT", "DiD"], B=25, seed=9)
    b = bootstrap_ensemble(c, ["CaT", "DiD"], B=25, seed=9)
    assert a.replicates.tobytes() == b.replicates.tobytes()


def test_cat_and_psm_are_highly_correlated():
    rng = np.random.default_rng(7)
    n = 1500
    w = rng.normal(size=(n, 2))
    x = (rng.random(n) < 1 / (1 + np.exp(-(w[:, 0] - 0.5)))).astype(float)
    y1 = (rng.random(n) < 0.15 + 0.05 * x + 0.05 * (w[:, 0] > 0)).astype(float)
    from triangulate.cohort import Cohort

    c = Cohort(patient_id=range(n), cluster_id=[0] * n, x=x, y1=y1, w0=w, w1=w)
    ens = bootstrap_ensemble(c, ["CaT", "PSM_CaT"], B=60, seed=2)
    assert ens.correlation[0, 1] > 0.8


def test_subset_keeps_covariance_block():
    reps = np.random.default_rng(0).normal(size=(50, 3))
    ens = ensemble_from_replicates(("CaT", "IV_TSLS", "DiD"), reps, [0.1, 0.2, 0.3])
    sub = ens.subset(["DiD", "CaT"])
    assert sub.methods == ("DiD", "CaT")
    assert sub.covariance[0, 1] == pytest.approx(ens.covariance[2, 0])
    assert q_statistic(sub).df == 1
