import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brainage.cohort import N_FEATURES, CohortTable, SiteSpec, simulate_cohort
from brainage.container import ContainerError
from brainage.harmonize import (
    HarmonizationError,
    SplineBasis,
    apply_harmonizer,
    fit_harmonizer,
    load_harmonizer,
    save_harmonizer,
    spline_basis,
)
from conftest import linear_spec, make_record


def site(label, loc=0.0, scale=1.0):
    return SiteSpec(label, np.broadcast_to(np.asarray(loc, float), (N_FEATURES,)).copy(),
                    np.broadcast_to(np.asarray(scale, float), (N_FEATURES,)).copy())


def two_site_table(n=2000, seed=0, loc2=0.0, scale2=1.0):
    return simulate_cohort(linear_spec(n, seed, noise_sd=1.0, sites=[site("site1"), site("site2", loc2, scale2)]))


def residual_site_means(table, truth):
    """Per-site mean of features after removing the known generative covariate part."""
    resid = table.features - truth.baseline - np.outer(table.ages, truth.age_loadings)
    sites = np.array(table.sites)
    return {s: resid[sites == s].mean(axis=0) for s in sorted(set(table.sites))}


# -- spline basis ------------------------------------------------------------


def test_spline_shape_and_finiteness():
    ages = np.random.default_rng(0).uniform(18, 65, 100)
    B = spline_basis(ages, 5)
    assert B.shape == (100, 5) and np.all(np.isfinite(B))
    basis = SplineBasis.fit(ages, 5)
    assert np.all(np.diff(basis.knots) > 0)
    assert np.all(np.isfinite(basis(np.array([0.0, 18.0, 65.0, 120.0]))))


def test_spline_errors():
    with pytest.raises(ValueError):
        spline_basis(np.full(20, 40.0), 5)
    with pytest.raises(ValueError):
        spline_basis(np.linspace(18, 65, 20), 2)
    with pytest.raises(ValueError):
        spline_basis(np.array([20.0, 30.0, 40.0]), 5)


@settings(max_examples=30)
@given(st.integers(3, 8), st.integers(0, 10_000), st.floats(-5, 5), st.floats(-100, 100))
def test_spline_reproduces_linear_functions(df, seed, slope, intercept):
    ages = np.random.default_rng(seed).uniform(18, 65, 60)
    X = np.column_stack([np.ones(60), spline_basis(ages, df)])
    y = slope * ages + intercept
    fitted = X @ np.linalg.lstsq(X, y, rcond=None)[0]
    assert np.max(np.abs(fitted - y)) < 1e-9


def test_spline_linear_reproduction_example():
    ages = np.linspace(18, 65, 50)
    X = np.column_stack([np.ones(50), spline_basis(ages, 5)])
    y = 2 * ages + 1
    assert np.max(np.abs(X @ np.linalg.lstsq(X, y, rcond=None)[0] - y)) < 1e-9


# -- fitting -----------------------------------------------------------------


def test_single_site_is_a_no_op():
    table, _ = simulate_cohort(linear_spec(300, 1))
    model = fit_harmonizer(table, eb_enabled=True)
    assert np.max(np.abs(model.gamma_star)) < 1e-9 and np.max(np.abs(model.delta_star - 1)) < 1e-9
    assert np.max(np.abs(model.gamma_hat)) < 1e-9 and np.max(np.abs(model.delta_hat - 1)) < 1e-9
    out = apply_harmonizer(model, table)
    assert np.max(np.abs(out.features - table.features)) < 1e-9


def test_model_shapes_and_invariants():
    table, _ = two_site_table(400, 2, loc2=3.0, scale2=1.5)
    model = fit_harmonizer(table, df=4)
    assert model.coefficients.shape == (N_FEATURES, 4 + 3)
    assert model.sites == ("site1", "site2")
    assert np.all(model.delta_star > 0) and np.all(model.delta_hat > 0)


def test_location_shift_recovered_against_reference_site():
    loc = np.zeros(N_FEATURES)
    loc[0] = 10.0
    table, _ = two_site_table(loc2=loc)
    model = fit_harmonizer(table, eb_enabled=False, reference_site="site1")
    s2 = model.sites.index("site2")
    assert abs(model.gamma_hat[s2, 0] * model.sigma[0] - 10.0) <= 0.2
    assert np.max(np.abs(model.gamma_hat[s2, 1:] * model.sigma[1:])) < 0.3
    assert np.all(model.gamma_hat[model.sites.index("site1")] == 0)


def test_location_shift_recovered_without_reference():
    loc = np.zeros(N_FEATURES)
    loc[0] = 10.0
    table, _ = two_site_table(loc2=loc)
    model = fit_harmonizer(table, eb_enabled=False)
    diff = (model.gamma_hat[1, 0] - model.gamma_hat[0, 0]) * model.sigma[0]
    assert abs(diff - 10.0) <= 0.2
    # pooled convention: n-weighted site locations cancel
    w = np.bincount([model.sites.index(s) for s in table.sites]) / len(table)
    assert np.max(np.abs(w @ model.gamma_hat)) < 1e-9


def test_scale_corruption_recovered():
    table, _ = two_site_table(scale2=2.0)
    model = fit_harmonizer(table, eb_enabled=False, reference_site="site1")
    d = model.delta_hat[model.sites.index("site2")]
    assert abs(np.median(d) - 2.0) <= 0.1
    assert np.all(np.abs(d - 2.0) <= 0.1 * 2.0)
    ratio = fit_harmonizer(table, eb_enabled=False)
    r = ratio.delta_hat[1] / ratio.delta_hat[0]
    assert abs(np.median(r) - 2.0) <= 0.1


def test_eb_shrinks_toward_site_prior_mean():
    rng = np.random.default_rng(5)
    sites = [site("site1"), site("site2", rng.normal(0, 1.0, N_FEATURES), rng.uniform(0.8, 1.3, N_FEATURES))]
    table, _ = simulate_cohort(linear_spec(60, 3, noise_sd=1.0, sites=sites))
    model = fit_harmonizer(table, eb_enabled=True)
    gb = model.gamma_bar[:, None]
    assert np.all(np.abs(model.gamma_star - gb) <= np.abs(model.gamma_hat - gb) + 1e-12)
    assert np.all(model.delta_star > 0)
    assert np.all(model.tau2 > 0) and np.all(model.a_prior > 0) and np.all(model.b_prior > 0)


def test_reference_site_data_is_unchanged():
    table, _ = two_site_table(500, 3, loc2=4.0, scale2=1.3)
    model = fit_harmonizer(table, eb_enabled=True, reference_site="site1")
    out = apply_harmonizer(model, table)
    m = np.array(table.sites) == "site1"
    assert np.max(np.abs(out.features[m] - table.features[m])) < 1e-9


def test_fit_errors():
    table, _ = two_site_table(50, 1)
    with pytest.raises(HarmonizationError, match="reference site"):
        fit_harmonizer(table, reference_site="nowhere")
    recs = list(table.records[:10]) + [make_record(999, site="lonely")]
    with pytest.raises(HarmonizationError, match=">= 2 subjects"):
        fit_harmonizer(CohortTable(recs))
    recs = [make_record(i, age=20.0 + i, features=np.full(N_FEATURES, 1.0 + i), etiv=None if i == 3 else 1.5)
            for i in range(30)]
    with pytest.raises(HarmonizationError, match="eTIV missing"):
        fit_harmonizer(CohortTable(recs))


def test_unknown_site_on_apply():
    table, _ = two_site_table(100, 1)
    model = fit_harmonizer(table)
    other = CohortTable([make_record(0, site="site9")])
    with pytest.raises(HarmonizationError, match="site9"):
        apply_harmonizer(model, other)


# -- properties --------------------------------------------------------------


def test_idempotence_with_eb_off():
    table, _ = two_site_table(800, 4, loc2=5.0, scale2=1.7)
    model = fit_harmonizer(table, eb_enabled=False)
    once = apply_harmonizer(model, table)
    refit = fit_harmonizer(once, eb_enabled=False)
    assert np.max(np.abs(refit.gamma_hat)) < 1e-6
    assert np.max(np.abs(refit.delta_hat - 1)) < 1e-6
    twice = apply_harmonizer(refit, once)
    assert np.max(np.abs(twice.features - once.features)) < 1e-6


def test_grand_mean_preserved_on_training_table():
    table, _ = two_site_table(600, 6, loc2=3.0, scale2=1.4)
    out = apply_harmonizer(fit_harmonizer(table, eb_enabled=False), table)
    assert np.max(np.abs(out.features.mean(axis=0) - table.features.mean(axis=0))) < 1e-6
    # Shrunk site locations no longer cancel exactly; the drift stays well inside the noise.
    out = apply_harmonizer(fit_harmonizer(table, eb_enabled=True), table)
    assert np.max(np.abs(out.features.mean(axis=0) - table.features.mean(axis=0))) < 0.01


def test_site_differences_removed_and_age_slopes_kept():
    rng = np.random.default_rng(8)
    sites = [site(f"site{k}", rng.normal(0, 5, N_FEATURES), rng.uniform(0.7, 1.4, N_FEATURES)) for k in (1, 2, 3)]
    table, truth = simulate_cohort(linear_spec(2000, 9, noise_sd=1.0, sites=sites))
    out = apply_harmonizer(fit_harmonizer(table), table)
    means = residual_site_means(out, truth)
    sigma = np.std(out.features - truth.baseline - np.outer(out.ages, truth.age_loadings), axis=0)
    spread = np.max(np.stack(list(means.values())), axis=0) - np.min(np.stack(list(means.values())), axis=0)
    assert np.all(spread < 0.05 * sigma)
    slopes = np.polyfit(out.ages, out.features, 1)[0]
    assert np.all(np.abs(slopes - truth.age_loadings) <= 0.05 * np.abs(truth.age_loadings))


def test_save_load_round_trip(tmp_path):
    table, _ = two_site_table(300, 2, loc2=1.0, scale2=1.2)
    model = fit_harmonizer(table, reference_site="site2")
    path = tmp_path / "h.bagc"
    save_harmonizer(model, path)
    back = load_harmonizer(path)
    for name in ("coef_spline", "coef_sex", "coef_etiv", "intercept", "sigma", "gamma_star", "delta_star"):
        assert getattr(back, name).tobytes() == getattr(model, name).tobytes()
    assert back.sites == model.sites and back.reference_site == "site2"
    np.testing.assert_array_equal(apply_harmonizer(back, table).features, apply_harmonizer(model, table).features)
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(ContainerError):
        load_harmonizer(path)
