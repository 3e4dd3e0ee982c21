import itertools
import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from brainage import stats
from stats_fixtures import ancova_sample, chronic_cohort

DATA = Path(__file__).parent / "data"


def dense_hc3(X, y):
    """The sandwich written out with explicit inverses and a dense diagonal."""
    XtX_inv = np.linalg.inv(X.T @ X)
    H = X @ XtX_inv @ X.T
    e = y - H @ y
    h = np.diag(H)
    return XtX_inv @ X.T @ np.diag(e**2 / (1 - h) ** 2) @ X @ XtX_inv


def random_design(rng, n=12, k=3):
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    y = X @ rng.normal(size=k) + rng.normal(size=n) * rng.uniform(0.5, 2, n)
    return X, y


# -- zscore / OLS ------------------------------------------------------------


def test_zscore():
    z, mean, sd = stats.zscore([1.0, 2.0, 3.0])
    assert z.tolist() == [-1.0, 0.0, 1.0] and mean == 2.0 and sd == 1.0
    with pytest.raises(ValueError):
        stats.zscore([4.0, 4.0, 4.0])


@settings(max_examples=50)
@given(hnp.arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e4, 1e4)))
def test_zscore_moments(x):
    if np.std(x) < 1e-6 * max(1.0, np.max(np.abs(x))):
        return
    z, _, _ = stats.zscore(x)
    assert abs(z.mean()) < 1e-12 and abs(z.std(ddof=1) - 1) < 1e-12


def test_ols_examples():
    fit = stats.ols_fit(np.ones((3, 1)), [1.0, 2.0, 3.0])
    assert np.allclose(fit.beta, [2.0]) and fit.r2 == 0.0
    X = np.column_stack([np.ones(4), [0.0, 1.0, 2.0, 3.0]])
    fit = stats.ols_fit(X, [0.0, 1.0, 2.0, 3.0])
    assert np.allclose(fit.beta, [0.0, 1.0], atol=1e-12) and abs(fit.r2 - 1) < 1e-12
    X = np.column_stack([np.ones(5), np.arange(5.0), np.arange(5.0)])
    with pytest.raises(stats.RankDeficiencyError, match="'age_copy'"):
        stats.ols_fit(X, np.arange(5.0), names=["intercept", "age", "age_copy"])


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(5, 40), st.integers(1, 4))
def test_ols_invariants(seed, n, k):
    rng = np.random.default_rng(seed)
    X, y = random_design(rng, n=max(n, k + 2), k=k)
    fit = stats.ols_fit(X, y)
    assert np.max(np.abs(X.T @ fit.residuals)) < 1e-8 * max(1.0, np.abs(y).max() * len(y))
    assert 0 <= fit.r2 <= 1
    assert abs(fit.leverages.sum() - X.shape[1]) < 1e-9
    assert np.all((fit.leverages >= 0) & (fit.leverages < 1 + 1e-12))


def test_design_matrix_build():
    dm = stats.DesignMatrix.build({"a": [1.0, 2.0, 3.0], "b": [0.0, 1.0, 0.0]}, standardize=("a",))
    assert dm.names == ["intercept", "a", "b"]
    assert dm.X[:, 1].tolist() == [-1.0, 0.0, 1.0] and dm.normalization == {"a": (2.0, 1.0)}
    with pytest.raises(ValueError, match="intercept"):
        stats.DesignMatrix(["x"], np.array([[2.0], [3.0]]))


# -- HC3 ---------------------------------------------------------------------


def test_hc3_hand_example():
    X = np.ones((2, 1))
    fit = stats.ols_fit(X, [0.0, 2.0])
    cov = stats.hc3_covariance(X, fit)
    # exact up to floating-point rounding of the QR factors
    assert abs(math.sqrt(cov[0, 0]) - math.sqrt(2)) <= 1e-15 * math.sqrt(2)


def test_hc3_zero_residuals_and_exact_fit_point():
    X = np.column_stack([np.ones(4), np.arange(4.0)])
    fit = stats.ols_fit(X, 3 * np.arange(4.0) + 1)
    assert np.all(np.abs(stats.hc3_covariance(X, fit)) < 1e-25)
    X = np.column_stack([np.ones(4), [0.0, 0.0, 0.0, 1.0]])
    fit = stats.ols_fit(X, [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(ValueError, match="leverage"):
        stats.hc3_covariance(X, fit)


def test_hc3_matches_dense_formula():
    rng = np.random.default_rng(0)
    for _ in range(100):
        X, y = random_design(rng)
        cov = stats.hc3_covariance(X, stats.ols_fit(X, y))
        ref = dense_hc3(X, y)
        assert np.max(np.abs(cov - ref)) <= 1e-10 * max(1.0, np.max(np.abs(ref)))


@settings(max_examples=50)
@given(st.integers(0, 10_000), st.integers(8, 30), st.integers(1, 5))
def test_hc3_symmetric_psd(seed, n, k):
    X, y = random_design(np.random.default_rng(seed), n=n, k=k)
    cov = stats.hc3_covariance(X, stats.ols_fit(X, y))
    assert np.array_equal(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-10 * np.trace(cov)


@settings(max_examples=40)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.floats(-50, 50))
def test_standardizing_a_predictor_leaves_inference_unchanged(seed, scale, shift):
    rng = np.random.default_rng(seed)
    X, y = random_design(rng, n=30, k=4)
    X2 = X.copy()
    X2[:, 2] = X[:, 2] * scale + shift
    X3 = X.copy()
    X3[:, 2] = stats.zscore(X[:, 2])[0]
    base = stats.ols_fit(X, y)
    inf = stats.robust_inference(X, base)
    for Xs in (X2, X3):
        fit = stats.ols_fit(Xs, y)
        other = stats.robust_inference(Xs, fit)
        # the intercept moves with the shift; every slope test is invariant
        assert np.allclose(np.abs(other.z[1:]), np.abs(inf.z[1:]), rtol=0, atol=1e-9 * max(1, np.abs(inf.z).max()))
        assert np.allclose(other.p[1:], inf.p[1:], rtol=0, atol=1e-9)
        assert abs(fit.r2 - base.r2) < 1e-9
        F1, *_ = stats.f_statistic(fit.r2, 3, 30)
        F0, *_ = stats.f_statistic(base.r2, 3, 30)
        assert abs(F1 - F0) < 1e-9 * max(1, F0)
        assert abs(stats.cohens_f2(fit.r2) - stats.cohens_f2(base.r2)) < 1e-9
    pure = X.copy()
    pure[:, 2] *= scale
    other = stats.robust_inference(pure, stats.ols_fit(pure, y))
    assert np.allclose(np.abs(other.z), np.abs(inf.z), rtol=0, atol=1e-9 * max(1, np.abs(inf.z).max()))


# -- Wald, f2, F -------------------------------------------------------------


def test_wald_examples():
    z, p = stats.wald_z([0.0], [1.0])
    assert z[0] == 0 and p[0] == 1
    z, p = stats.wald_z([2.0], [1.0])
    assert z[0] == 2 and abs(p[0] - 0.04550) < 1e-5
    z, p = stats.wald_z([4.70], [1.0])
    assert abs(p[0] - 2.60e-6) <= 0.02 * 2.60e-6
    with pytest.raises(ValueError):
        stats.wald_z([1.0], [0.0])
    X, y = random_design(np.random.default_rng(1))
    fit = stats.ols_fit(X, y)
    cov = stats.hc3_covariance(X, fit)
    z, p = stats.wald_z(fit, cov)
    assert np.allclose(z, fit.beta / np.sqrt(np.diag(cov)))
    assert np.all((p >= 0) & (p <= 1))


def test_normal_tail_precision():
    from scipy import stats as sps

    for z in (0.5, 1.96, 3.0, 4.7, 8.0):
        assert abs(stats.normal_two_sided_p(z) - 2 * sps.norm.sf(z)) < 1e-15


def test_effect_sizes_and_f():
    assert stats.cohens_f2(0.5) == 1.0
    assert abs(stats.cohens_f2(0.2) - 0.25) < 1e-15
    assert stats.local_f2(0.5, 0.5) == 0.0
    with pytest.raises(ValueError):
        stats.cohens_f2(1.0)
    with pytest.raises(ValueError):
        stats.local_f2(0.3, 0.4)
    assert stats.f_statistic(0.0, 7, 45)[0] == 0.0
    F, df1, df2 = stats.f_statistic(0.23, 7, 45)
    assert abs(F - (0.23 / 7) / (0.77 / 37)) < 1e-12 and abs(F - 1.5788) < 1e-4 and (df1, df2) == (7, 37)
    assert abs(stats.f_statistic(0.24, 7, 45)[0] - 1.669) < 1e-3
    with pytest.raises(ValueError):
        stats.f_statistic(0.2, 7, 8)


# -- ANCOVA ------------------------------------------------------------------


def _ancova(d, **kw):
    return stats.ancova(d["gap"], d["group"], d["age"], d["sex"], d["bmi"], d["etiv"], **kw)


def test_ancova_null_level():
    inside = sum(abs(_ancova(ancova_sample(seed, 200)).coefficient("group").z) < 1.96 for seed in range(200))
    assert inside >= 180


def test_ancova_recovers_injected_difference():
    rep = _ancova(ancova_sample(7, 400, effect=5.0))
    assert abs(rep.extras["adjusted_difference"] - 5.0) <= 1.0
    assert rep.coefficient("group").p < 0.01
    assert [r.name for r in rep.coefficients] == ["intercept", "group", "age", "sex", "bmi", "etiv"]


def test_ancova_orthogonal_covariates_give_raw_difference():
    # Within each group the covariates take the same centred values, so they are
    # orthogonal to the group indicator and the adjusted difference is the raw one.
    rng = np.random.default_rng(3)
    m = 40
    age = np.tile(rng.uniform(18, 65, m), 2)
    bmi = np.tile(rng.normal(25, 4, m), 2)
    etiv = np.tile(rng.normal(1.5, 0.1, m), 2)
    sex = np.tile(np.repeat([0.0, 1.0], m // 2), 2)
    group = np.repeat([0.0, 1.0], m)
    gap = rng.normal(0, 3, 2 * m) + 2.5 * group
    rep = stats.ancova(gap, group, age, sex, bmi, etiv)
    raw = gap[group == 1].mean() - gap[group == 0].mean()
    assert abs(rep.extras["adjusted_difference"] - raw) < 1e-9
    assert rep.extras["raw_mean_difference"] == pytest.approx(raw, abs=1e-12)


def test_ancova_listwise_deletion_and_errors():
    d = ancova_sample(1, 50)
    d["bmi"][[0, 3, 70]] = np.nan
    rep = _ancova(d)
    assert rep.fit.n_deleted == 3 and rep.fit.n_used == 97
    d = ancova_sample(1, 20)
    d["group"][:] = 0.0
    with pytest.raises(stats.InsufficientDataError, match="empty group"):
        _ancova(d)
    d = ancova_sample(1, 20)
    d["etiv"][:] = np.nan
    with pytest.raises(stats.MissingCovariateError, match="etiv"):
        _ancova(d)


# -- interaction regression --------------------------------------------------


def _interaction(d, **kw):
    return stats.interaction_regression(d["gap"], d["cpz"], d["duration"], d["age"], d["sex"], d["etiv"], d["bmi"], **kw)


def test_interaction_layout_and_counts():
    rep = _interaction(chronic_cohort())
    assert [r.name for r in rep.coefficients] == [
        "intercept", "cpz", "duration", "cpz_x_duration", "age", "sex", "etiv", "bmi"]
    assert (rep.fit.n_used, rep.fit.n_deleted, rep.fit.df1, rep.fit.df2) == (45, 6, 7, 37)
    text = rep.to_text()
    header = next(line for line in text.splitlines() if line.startswith("Predictor"))
    assert header.split("  ")[0] == "Predictor"
    for col in ("Beta Coefficient", "Standard Error", "z", "p-value"):
        assert col in header
    assert "Chlorpromazine Equivalents x Duration" in text
    assert "Model fit: R^2 = " in text and "F(7, 37) = " in text


def test_interaction_recovers_duration_effect():
    rep = _interaction(chronic_cohort(seed=2, n=500, n_missing=0, duration_effect=0.5))
    assert abs(rep.coefficient("duration").beta - 0.5) <= 0.1


def test_interaction_null_calibration():
    from scipy import stats as sps

    ps = [_interaction(chronic_cohort(seed=s, n=60, n_missing=0)).fit.F_p for s in range(500)]
    assert sps.kstest(ps, "uniform").statistic < 0.1


def test_interaction_too_few_rows():
    d = chronic_cohort(n=12, n_missing=4)
    with pytest.raises(stats.InsufficientDataError, match="n=8"):
        _interaction(d)


def test_interaction_golden_report():
    rep = _interaction(chronic_cohort(), analysis="Analysis 3")
    golden = json.loads((DATA / "golden_a3.json").read_text())
    got = json.loads(rep.to_json())
    assert got.keys() == golden.keys()
    assert [r.keys() for r in got["coefficients"]] == [r.keys() for r in golden["coefficients"]]
    for a, b in zip(got["coefficients"], golden["coefficients"]):
        assert a["name"] == b["name"]
        for key in ("beta", "se", "z", "p"):
            assert a[key] == pytest.approx(b[key], rel=1e-9, abs=1e-12)
    for key, val in golden["fit"].items():
        assert got["fit"][key] == pytest.approx(val, rel=1e-9, abs=1e-12)
    assert rep.to_text() == (DATA / "golden_a3.txt").read_text()


# -- Mann-Whitney ------------------------------------------------------------


def brute_force_p(x, y):
    pooled = np.concatenate([x, y])
    n, m = len(x), len(y)
    ranks = np.argsort(np.argsort(pooled)) + 1.0
    u_obs = ranks[:n].sum() - n * (n + 1) / 2
    dev = abs(u_obs - n * m / 2)
    hits = total = 0
    for combo in itertools.combinations(range(n + m), n):
        u = sum(combo) + n - n * (n + 1) / 2
        hits += abs(u - n * m / 2) >= dev - 1e-9
        total += 1
    return hits / total


def test_mwu_examples():
    r = stats.mann_whitney_u([1.0, 2.0], [3.0, 4.0])
    assert r.value == 0 and r.exact and abs(r.p - 2 / 6) < 1e-15
    r = stats.mann_whitney_u([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    assert r.value == 4.5 and r.z == 0 and r.p == 1
    with pytest.raises(stats.InsufficientDataError):
        stats.mann_whitney_u([], [1.0])


def test_mwu_exact_matches_enumeration():
    rng = np.random.default_rng(0)
    for n in range(1, 8):
        for m in range(1, 8):
            x, y = rng.normal(size=n), rng.normal(size=m) + rng.normal()
            r = stats.mann_whitney_u(x, y)
            assert r.exact
            assert abs(r.p - brute_force_p(x, y)) < 1e-12, (n, m)


@pytest.mark.parametrize("n,m", [(1, 1), (3, 5), (7, 7), (10, 10), (4, 16)])
def test_mwu_distribution_sums_to_one(n, m):
    counts = stats.mwu_counts(n, m)
    assert len(counts) == n * m + 1
    assert abs(sum(counts) / math.comb(n + m, n) - 1) < 1e-12
    assert counts == counts[::-1]


@settings(max_examples=60)
@given(hnp.arrays(np.float64, st.integers(1, 25), elements=st.integers(-5, 5).map(float)),
       hnp.arrays(np.float64, st.integers(1, 25), elements=st.integers(-5, 5).map(float)))
def test_mwu_complementarity_and_monotone_invariance(x, y):
    ux = stats.mann_whitney_u(x, y)
    uy = stats.mann_whitney_u(y, x)
    assert ux.value + uy.value == len(x) * len(y)
    assert 0 <= ux.value <= len(x) * len(y) and 0 <= ux.p <= 1
    assert abs(ux.p - uy.p) < 1e-12
    t = stats.mann_whitney_u(np.exp(x / 3) * 7 - 2, np.exp(y / 3) * 7 - 2)
    assert t.value == ux.value and t.p == ux.p


def test_mwu_normal_approximation_matches_scipy():
    from scipy import stats as sps

    rng = np.random.default_rng(5)
    x, y = np.round(rng.normal(size=24), 1), np.round(rng.normal(size=15), 1)
    r = stats.mann_whitney_u(x, y)
    ref = sps.mannwhitneyu(x, y, method="asymptotic", use_continuity=True)
    assert not r.exact and r.value == ref.statistic and abs(r.p - ref.pvalue) < 1e-12
    assert abs(r.effect_r - abs(r.z) / math.sqrt(39)) < 1e-15


# -- Shapiro-Wilk ------------------------------------------------------------


def test_shapiro_reference_table():
    rows = json.loads((DATA / "sw_reference.json").read_text())
    assert len(rows) == 10 and {len(r["x"]) for r in rows} == {10, 25, 50}
    for r in rows:
        res = stats.shapiro_wilk(r["x"])
        assert abs(res.value - r["W"]) <= 1e-3 and abs(res.p - r["p"]) <= 1e-3, r["kind"]


def test_shapiro_errors_and_small_n():
    with pytest.raises(ValueError, match="constant"):
        stats.shapiro_wilk([2.0] * 10)
    with pytest.raises(ValueError):
        stats.shapiro_wilk([1.0, 2.0])
    r = stats.shapiro_wilk([1.0, 2.0, 4.0])
    assert 0.75 <= r.value <= 1 and 0 <= r.p <= 1
    assert stats.shapiro_wilk([1.0, 2.0, 3.0]).p == pytest.approx(1.0)


@settings(max_examples=80)
@given(hnp.arrays(np.float64, st.integers(3, 200), elements=st.floats(-1e3, 1e3)))
def test_shapiro_w_bounds(x):
    if np.ptp(x) < 1e-6:
        return
    r = stats.shapiro_wilk(x)
    assert 0 < r.value <= 1 and 0 <= r.p <= 1


# -- reports -----------------------------------------------------------------


def test_report_json_field_names():
    rep = _ancova(ancova_sample(2, 30))
    d = json.loads(rep.to_json())
    assert set(d["coefficients"][0]) == {"name", "beta", "se", "z", "p"}
    assert {"r2", "f2", "F", "df1", "df2", "n_used", "n_deleted"} <= set(d["fit"])
    t = stats.StatReport("mwu", test=stats.mann_whitney_u([1.0, 2.0], [3.0])).to_dict()["test"]
    assert set(t) == {"kind", "value", "z", "p", "effect_r"}
