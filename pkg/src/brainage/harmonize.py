"""Site harmonization with a smooth age term (ComBat-GAM style).

Per feature, the covariate model is

    y = alpha + B(age) @ theta + b_sex * sex + b_etiv * etiv + site offset + e

where ``B`` is a centred natural cubic spline basis.  Residuals are
standardized by a pooled scale ``sigma`` and each site gets a location
``gamma`` and scale ``delta`` on that standardized scale, optionally shrunk
across features by parametric empirical Bayes.

The covariate model is fit by least squares weighted by ``1 / delta`` of the
subject's site, iterated to a fixed point.  Within-site weights are constant,
so per-site residual sums stay zero (the site offsets are unaffected), and at
the fixed point the harmonized residuals ``e / delta`` are orthogonal to the
design.  That makes location/scale removal exactly idempotent: refitting on
harmonized data returns gamma = 0 and delta = 1.  With a single site the
weights are uniform and the fit reduces to ordinary least squares.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .cohort import CohortTable
from .container import ContainerError, read_container, write_container

CONTAINER_KIND = "harmonizer"
VERSION_TAG = "brainage-harmonizer/1"


class HarmonizationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Natural cubic spline basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SplineBasis:
    """Centred natural cubic spline basis without intercept.

    ``knots`` holds the two boundary knots and ``df - 1`` interior knots.
    Columns are the truncated-power natural spline functions of the age
    rescaled to [0, 1] over the boundary knots, minus ``centers`` (their means
    on the fitting ages).  Outside the boundary knots the basis is linear.
    """

    knots: np.ndarray
    centers: np.ndarray

    @property
    def df(self) -> int:
        return len(self.knots) - 1

    def raw(self, ages) -> np.ndarray:
        x = np.asarray(ages, dtype=np.float64)
        lo, hi = self.knots[0], self.knots[-1]
        u = (x - lo) / (hi - lo)
        k = (self.knots - lo) / (hi - lo)
        K = len(k)

        def d(j):
            return (np.maximum(u - k[j], 0.0) ** 3 - np.maximum(u - k[K - 1], 0.0) ** 3) / (k[K - 1] - k[j])

        cols = [u]
        last = d(K - 2)
        for j in range(K - 2):
            cols.append(d(j) - last)
        return np.column_stack(cols)

    def __call__(self, ages) -> np.ndarray:
        return self.raw(ages) - self.centers

    @classmethod
    def fit(cls, ages, df: int = 5) -> "SplineBasis":
        ages = np.asarray(ages, dtype=np.float64)
        if df < 3:
            raise ValueError(f"df must be >= 3, got {df}")
        if not np.all(np.isfinite(ages)):
            raise ValueError("ages must be finite")
        distinct = np.unique(ages)
        if len(distinct) < df:
            raise ValueError(f"insufficient distinct ages: {len(distinct)} < df={df}")
        probs = np.linspace(0.0, 1.0, df + 1)
        knots = np.quantile(ages, probs)
        if np.any(np.diff(knots) <= 0):
            knots = np.quantile(distinct, probs)
        if np.any(np.diff(knots) <= 0):
            raise ValueError("insufficient distinct ages to place strictly increasing knots")
        basis = cls(knots, np.zeros(df))
        return cls(knots, basis.raw(ages).mean(axis=0))


def spline_basis(ages, df: int = 5) -> np.ndarray:
    """Centred natural cubic spline basis of ``ages``, shape (n, df)."""
    return SplineBasis.fit(ages, df)(ages)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HarmonizationModel:
    basis: SplineBasis
    coef_spline: np.ndarray  # (F, df)
    coef_sex: np.ndarray  # (F,)
    coef_etiv: np.ndarray  # (F,)
    intercept: np.ndarray  # (F,) site-free intercept
    sigma: np.ndarray  # (F,) pooled residual scale
    sites: tuple[str, ...]
    gamma_hat: np.ndarray  # (S, F)
    delta_hat: np.ndarray  # (S, F)
    gamma_star: np.ndarray  # (S, F) used by apply
    delta_star: np.ndarray  # (S, F)
    gamma_bar: np.ndarray  # (S,) EB prior mean, NaN when EB off
    tau2: np.ndarray  # (S,) EB prior variance of gamma
    a_prior: np.ndarray  # (S,) inverse-gamma shape for delta^2
    b_prior: np.ndarray  # (S,) inverse-gamma scale
    eb_enabled: bool
    reference_site: str | None = None
    n_iter: int = 0

    @property
    def coefficients(self) -> np.ndarray:
        """Per-feature covariate coefficients, shape (F, df + 3): spline, sex, eTIV, intercept."""
        return np.column_stack([self.coef_spline, self.coef_sex, self.coef_etiv, self.intercept])

    def covariate_fit(self, ages, sex, etiv) -> np.ndarray:
        B = self.basis(ages)
        return (
            self.intercept
            + B @ self.coef_spline.T
            + np.outer(sex, self.coef_sex)
            + np.outer(etiv, self.coef_etiv)
        )

    def site_index(self, sites: Sequence[str]) -> np.ndarray:
        lookup = {s: i for i, s in enumerate(self.sites)}
        idx = []
        for s in sites:
            if s not in lookup:
                raise HarmonizationError(f"unknown site label {s!r}; model roster is {list(self.sites)}")
            idx.append(lookup[s])
        return np.array(idx, dtype=np.int64)


def _covariates(table: CohortTable) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    etiv = table.covariate("etiv")
    if np.any(np.isnan(etiv)):
        missing = [sid for sid, v in zip(table.subject_ids, etiv) if np.isnan(v)]
        raise HarmonizationError(f"eTIV missing for {len(missing)} subject(s), e.g. {missing[:3]}")
    return table.ages, table.sex_codes, etiv


def _check_rank(X: np.ndarray, names: list[str]) -> None:
    for j in range(1, X.shape[1] + 1):
        if np.linalg.matrix_rank(X[:, :j]) < j:
            raise HarmonizationError(
                f"singular harmonization design: column {names[j - 1]!r} is collinear with earlier columns "
                "(affects every feature)"
            )


def _eb_shrink(z_site: np.ndarray, g_hat: np.ndarray, d2_hat: np.ndarray, tol: float, max_iter: int):
    """Parametric EB for one site; ``z_site`` is (n_s, F) standardized data."""
    n_s = z_site.shape[0]
    g_bar = g_hat.mean()
    tau2 = g_hat.var(ddof=1) if g_hat.size > 1 else 0.0
    m = d2_hat.mean()
    v = d2_hat.var(ddof=1) if d2_hat.size > 1 else 0.0
    if v > 0:
        a = (2 * v + m**2) / v
        b = (m * v + m**3) / v
    else:
        a = b = np.nan
    g_old, d2_old = g_hat.copy(), d2_hat.copy()
    for _ in range(max_iter):
        if tau2 > 0:
            g_new = (n_s * tau2 * g_hat + d2_old * g_bar) / (n_s * tau2 + d2_old)
        else:
            g_new = np.full_like(g_hat, g_bar)
        if v > 0:
            ss = ((z_site - g_new) ** 2).sum(axis=0)
            d2_new = (0.5 * ss + b) / (n_s / 2.0 + a - 1.0)
        else:
            d2_new = d2_hat.copy()
        change = max(
            np.max(np.abs(g_new - g_old) / (np.abs(g_old) + 1e-12)),
            np.max(np.abs(d2_new - d2_old) / d2_old),
        )
        g_old, d2_old = g_new, d2_new
        if change < tol:
            break
    return g_old, np.sqrt(d2_old), g_bar, tau2, a, b


def fit_harmonizer(
    table: CohortTable,
    df: int = 5,
    eb_enabled: bool = True,
    reference_site: str | None = None,
    *,
    eb_tol: float = 1e-6,
    wls_tol: float = 1e-13,
    max_iter: int = 500,
) -> HarmonizationModel:
    ages, sex, etiv = _covariates(table)
    Y = table.features
    sites = tuple(sorted(set(table.sites)))
    if reference_site is not None and reference_site not in sites:
        raise HarmonizationError(f"reference site {reference_site!r} not present in table")
    site_of = np.array([sites.index(s) for s in table.sites])
    S = len(sites)
    counts = np.bincount(site_of, minlength=S)
    if np.any(counts < 2):
        raise HarmonizationError(f"each site needs >= 2 subjects; counts {dict(zip(sites, counts.tolist()))}")

    basis = SplineBasis.fit(ages, df)
    onehot = (site_of[:, None] == np.arange(S)[None, :]).astype(np.float64)
    X = np.column_stack([basis(ages), sex, etiv, onehot])
    names = [f"age_spline_{k}" for k in range(df)] + ["sex", "etiv"] + [f"site[{s}]" for s in sites]
    _check_rank(X, names)
    p_cov = df + 2
    n, F = Y.shape
    ref = None if reference_site is None else sites.index(reference_site)
    frac = counts / n

    # Weights are constant within a site, so each feature's weighted normal
    # equations are a delta-weighted sum of per-site Gram blocks.
    masks = [site_of == s for s in range(S)]
    gram = np.stack([X[m].T @ X[m] for m in masks])  # (S, p, p)
    cross = np.stack([X[m].T @ Y[m] for m in masks])  # (S, p, F)
    delta = np.ones((S, F))
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        w = 1.0 / delta
        A = np.einsum("sf,sij->fij", w, gram)
        rhs = np.einsum("sf,sif->fi", w, cross)
        beta = np.linalg.solve(A, rhs[:, :, None])[:, :, 0].T  # (p, F)
        resid = Y - X @ beta
        site_coef = beta[p_cov:]  # (S, F)
        alpha = site_coef[ref] if ref is not None else frac @ site_coef
        ms = np.stack([np.mean(resid[m] ** 2, axis=0) for m in masks])  # (S, F)
        var = ms[ref] if ref is not None else frac @ ms
        if np.any(var <= 0):
            bad = [table.feature_names[j] for j in np.flatnonzero(var <= 0)]
            raise HarmonizationError(f"zero residual variance for feature(s) {bad[:5]}")
        new_delta = np.sqrt(ms / var)
        converged = np.max(np.abs(new_delta - delta)) < wls_tol
        delta = new_delta
        if converged or S == 1:
            break

    sigma = np.sqrt(var)
    gamma_hat = (site_coef - alpha) / sigma
    delta_hat = delta

    fit_free = alpha + X[:, :p_cov] @ beta[:p_cov]
    Z = (Y - fit_free) / sigma
    if eb_enabled:
        gamma_star = np.empty_like(gamma_hat)
        delta_star = np.empty_like(delta_hat)
        priors = np.full((4, S), np.nan)
        for s in range(S):
            if s == ref:
                gamma_star[s], delta_star[s] = 0.0, 1.0
                continue
            g, d, *pri = _eb_shrink(Z[site_of == s], gamma_hat[s], delta_hat[s] ** 2, eb_tol, max_iter)
            gamma_star[s], delta_star[s] = g, d
            priors[:, s] = pri
    else:
        gamma_star, delta_star = gamma_hat.copy(), delta_hat.copy()
        priors = np.full((4, S), np.nan)
    if ref is not None:
        gamma_star[ref], delta_star[ref] = 0.0, 1.0
    if not np.all(delta_star > 0):
        raise HarmonizationError("non-positive site scale estimate")

    return HarmonizationModel(
        basis=basis,
        coef_spline=beta[:df].T.copy(),
        coef_sex=beta[df].copy(),
        coef_etiv=beta[df + 1].copy(),
        intercept=np.asarray(alpha, dtype=np.float64).copy(),
        sigma=sigma,
        sites=sites,
        gamma_hat=gamma_hat,
        delta_hat=delta_hat,
        gamma_star=gamma_star,
        delta_star=delta_star,
        gamma_bar=priors[0],
        tau2=priors[1],
        a_prior=priors[2],
        b_prior=priors[3],
        eb_enabled=eb_enabled,
        reference_site=reference_site,
        n_iter=n_iter,
    )


def apply_harmonizer(model: HarmonizationModel, table: CohortTable) -> CohortTable:
    """Remove site location/scale effects from ``table``'s features."""
    idx = model.site_index(table.sites)
    ages, sex, etiv = _covariates(table)
    fit = model.covariate_fit(ages, sex, etiv)
    Z = (table.features - fit) / model.sigma
    out = model.sigma * (Z - model.gamma_star[idx]) / model.delta_star[idx] + fit
    return table.with_features(out, provenance=f"{table.provenance}|harmonized")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_ARRAY_FIELDS = (
    "coef_spline", "coef_sex", "coef_etiv", "intercept", "sigma", "gamma_hat", "delta_hat",
    "gamma_star", "delta_star", "gamma_bar", "tau2", "a_prior", "b_prior",
)


def save_harmonizer(model: HarmonizationModel, path) -> None:
    arrays = {"knots": model.basis.knots, "centers": model.basis.centers}
    arrays.update({name: getattr(model, name) for name in _ARRAY_FIELDS})
    meta = {
        "version": VERSION_TAG,
        "sites": list(model.sites),
        "eb_enabled": model.eb_enabled,
        "reference_site": model.reference_site,
        "n_iter": model.n_iter,
    }
    write_container(path, CONTAINER_KIND, arrays, meta)


def load_harmonizer(path) -> HarmonizationModel:
    arrays, meta = read_container(path, CONTAINER_KIND)
    if meta.get("version") != VERSION_TAG:
        raise ContainerError(f"harmonizer version {meta.get('version')!r} != {VERSION_TAG!r}")
    missing = {"knots", "centers", *_ARRAY_FIELDS} - set(arrays)
    if missing:
        raise ContainerError(f"harmonizer container missing arrays {sorted(missing)}")
    S, F = len(meta["sites"]), arrays["sigma"].shape[0]
    df = len(arrays["knots"]) - 1
    expected = {"centers": (df,), "coef_spline": (F, df)}
    expected.update({k: (S, F) for k in ("gamma_hat", "delta_hat", "gamma_star", "delta_star")})
    expected.update({k: (S,) for k in ("gamma_bar", "tau2", "a_prior", "b_prior")})
    expected.update({k: (F,) for k in ("coef_sex", "coef_etiv", "intercept")})
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ContainerError(f"harmonizer array {name!r} has shape {arrays[name].shape}, expected {shape}")
    return HarmonizationModel(
        basis=SplineBasis(arrays["knots"], arrays["centers"]),
        sites=tuple(meta["sites"]),
        eb_enabled=bool(meta["eb_enabled"]),
        reference_site=meta["reference_site"],
        n_iter=int(meta["n_iter"]),
        **{name: arrays[name] for name in _ARRAY_FIELDS},
    )
