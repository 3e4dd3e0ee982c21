"""Statistical battery for Brain Age Gap analyses.

OLS with HC3 sandwich errors and standard-normal Wald tests, ANCOVA and
interaction-regression wrappers with listwise deletion, Cohen's f^2, the
model F statistic, the Mann-Whitney U test (exact for small tie-free
samples) and the Shapiro-Wilk W test with Royston's p-value approximation.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy import special
from scipy import stats as sps


class RankDeficiencyError(ValueError):
    pass


class MissingCovariateError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Design matrices and OLS
# ---------------------------------------------------------------------------


def zscore(values) -> tuple[np.ndarray, float, float]:
    """Standardize with the sample SD (n - 1 denominator)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2:
        raise ValueError("zscore needs at least 2 values")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd == 0 or not np.isfinite(sd):
        raise ValueError("cannot z-score a zero-variance variable")
    return (x - mean) / sd, mean, sd


@dataclass(eq=False)
class DesignMatrix:
    names: list[str]
    X: np.ndarray
    normalization: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 2 or self.X.shape[1] != len(self.names):
            raise ValueError("design matrix shape does not match column names")
        if not np.all(self.X[:, 0] == 1.0):
            raise ValueError("first design column must be the all-ones intercept")

    @classmethod
    def build(cls, columns: Mapping[str, np.ndarray], standardize: Sequence[str] = ()) -> "DesignMatrix":
        """Intercept followed by ``columns`` in order; names in ``standardize`` are z-scored."""
        names, cols, norm = ["intercept"], [None], {}
        n = None
        for name, values in columns.items():
            v = np.asarray(values, dtype=np.float64)
            if name in standardize:
                v, mu, sd = zscore(v)
                norm[name] = (mu, sd)
            names.append(name)
            cols.append(v)
            n = len(v)
        cols[0] = np.ones(n if n is not None else 0)
        return cls(names, np.column_stack(cols), norm)


@dataclass(eq=False)
class OlsFit:
    names: list[str]
    beta: np.ndarray
    residuals: np.ndarray
    leverages: np.ndarray
    r2: float
    n: int
    k: int
    _q: np.ndarray = field(repr=False, default=None)
    _r: np.ndarray = field(repr=False, default=None)


def _as_design(X, names=None) -> tuple[np.ndarray, list[str]]:
    if isinstance(X, DesignMatrix):
        return X.X, list(X.names)
    X = np.asarray(X, dtype=np.float64)
    return X, list(names) if names is not None else [f"x{j}" for j in range(X.shape[1])]


def ols_fit(X, y, names: Sequence[str] | None = None) -> OlsFit:
    """Least squares via Householder QR.

    Raises :class:`RankDeficiencyError` naming the first column that is
    (numerically) a combination of the columns before it.
    """
    X, names = _as_design(X, names)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    if n <= k:
        raise InsufficientDataError(f"OLS needs n > k, got n={n}, k={k}")
    q, r = np.linalg.qr(X)
    diag = np.abs(np.diag(r))
    col_norms = np.linalg.norm(X, axis=0)
    for j in range(k):
        if diag[j] <= 1e-10 * max(col_norms[j], 1e-300):
            raise RankDeficiencyError(f"design is rank deficient: column {names[j]!r} is collinear with earlier columns")
    beta = np.linalg.solve(r, q.T @ y)
    resid = y - X @ beta
    lev = np.einsum("ij,ij->i", q, q)
    yc = y - y.mean()
    sst = float(yc @ yc)
    r2 = 1.0 - float(resid @ resid) / sst if sst > 0 else 0.0
    return OlsFit(names, beta, resid, lev, float(min(max(r2, 0.0), 1.0)), n, k, q, r)


def hc3_covariance(X, fit: OlsFit) -> np.ndarray:
    """HC3 sandwich ``(X'X)^-1 X' diag(e^2 / (1 - h)^2) X (X'X)^-1``."""
    X, _ = _as_design(X)
    h = fit.leverages
    if np.any(h >= 1.0 - 1e-12):
        i = int(np.argmax(h))
        raise ValueError(f"HC3 undefined: observation {i} has leverage {h[i]:.17g} (exact-fit point)")
    w = fit.residuals**2 / (1.0 - h) ** 2
    q, r = (fit._q, fit._r) if fit._q is not None else np.linalg.qr(X)
    rinv = np.linalg.solve(r, np.eye(r.shape[0]))
    meat = (q * w[:, None]).T @ q
    cov = rinv @ meat @ rinv.T
    return 0.5 * (cov + cov.T)


def normal_two_sided_p(z) -> np.ndarray:
    return 2.0 * special.ndtr(-np.abs(np.asarray(z, dtype=np.float64)))


def wald_z(beta, se) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal Wald test.

    Accepts ``(beta, se)`` vectors or ``(fit, covariance)``.
    """
    if isinstance(beta, OlsFit):
        beta, se = beta.beta, np.sqrt(np.clip(np.diag(np.asarray(se, dtype=np.float64)), 0.0, None))
    beta = np.asarray(beta, dtype=np.float64)
    se = np.asarray(se, dtype=np.float64)
    if np.any(se <= 0):
        raise ValueError("standard error must be positive for a Wald test")
    z = beta / se
    return z, np.minimum(normal_two_sided_p(z), 1.0)


@dataclass(eq=False)
class RobustInference:
    cov: np.ndarray
    se: np.ndarray
    z: np.ndarray
    p: np.ndarray


def robust_inference(X, fit: OlsFit) -> RobustInference:
    cov = hc3_covariance(X, fit)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    z, p = wald_z(fit.beta, se)
    return RobustInference(cov, se, z, p)


def cohens_f2(r2: float) -> float:
    if not 0 <= r2 < 1:
        raise ValueError(f"R^2 must be in [0, 1), got {r2}")
    return r2 / (1.0 - r2)


def local_f2(r2_full: float, r2_reduced: float) -> float:
    if not 0 <= r2_full < 1:
        raise ValueError(f"R^2 must be in [0, 1), got {r2_full}")
    if r2_reduced > r2_full:
        raise ValueError("reduced-model R^2 exceeds full-model R^2")
    return (r2_full - r2_reduced) / (1.0 - r2_full)


def f_statistic(r2: float, k_predictors: int, n: int) -> tuple[float, int, int]:
    df1, df2 = int(k_predictors), int(n - k_predictors - 1)
    if df1 < 1 or df2 < 1:
        raise ValueError(f"invalid degrees of freedom ({df1}, {df2})")
    if not 0 <= r2 < 1:
        raise ValueError(f"R^2 must be in [0, 1), got {r2}")
    return (r2 / df1) / ((1.0 - r2) / df2), df1, df2


def f_pvalue(F: float, df1: int, df2: int) -> float:
    return float(sps.f.sf(F, df1, df2))


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class CoefRow:
    name: str
    beta: float
    se: float
    z: float
    p: float


@dataclass
class FitBlock:
    r2: float
    f2: float
    F: float
    df1: int
    df2: int
    F_p: float
    n_used: int
    n_deleted: int


@dataclass
class TestResult:
    kind: str  # "U", "W" or "F"
    value: float
    z: float | None
    p: float
    effect_r: float | None = None
    exact: bool = False

    def to_dict(self) -> dict:
        return {"kind": self.kind, "value": self.value, "z": self.z, "p": self.p, "effect_r": self.effect_r}


@dataclass
class StatReport:
    analysis: str
    coefficients: list[CoefRow] = field(default_factory=list)
    fit: FitBlock | None = None
    test: TestResult | None = None
    labels: dict[str, str] = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def coefficient(self, name: str) -> CoefRow:
        for row in self.coefficients:
            if row.name == name:
                return row
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "analysis": self.analysis,
            "coefficients": [asdict(r) for r in self.coefficients],
            "fit": None if self.fit is None else asdict(self.fit),
            "test": None if self.test is None else self.test.to_dict(),
            "extras": self.extras,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def to_text(self) -> str:
        lines = [f"{self.analysis}"]
        if self.coefficients:
            head = ("Predictor", "Beta Coefficient", "Standard Error", "z", "p-value")
            rows = [
                (self.labels.get(r.name, r.name), f"{r.beta:.2f}", f"{r.se:.2f}", f"{r.z:.2f}", _fmt_p(r.p))
                for r in self.coefficients
            ]
            widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]
            fmt = lambda cells: "  ".join(  # noqa: E731
                str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(cells, widths))
            )
            lines.append(fmt(head))
            lines.extend(fmt(r) for r in rows)
        if self.fit is not None:
            f = self.fit
            lines.append(
                "Standard errors are heteroscedasticity-consistent (HC3). "
                f"Model fit: R^2 = {f.r2:.2f}, F({f.df1}, {f.df2}) = {f.F:.2f}, p = {_fmt_p(f.F_p)}; "
                f"Cohen's f^2 = {f.f2:.2f}; n = {f.n_used} ({f.n_deleted} deleted)"
            )
        if self.test is not None:
            t = self.test
            z = "" if t.z is None else f", z = {t.z:.2f}"
            r = "" if t.effect_r is None else f", r = {t.effect_r:.2f}"
            lines.append(f"{t.kind} = {t.value:g}{z}, p = {_fmt_p(t.p)}{r}{' (exact)' if t.exact else ''}")
        for key, val in self.extras.items():
            lines.append(f"{key}: {val:.4g}" if isinstance(val, float) else f"{key}: {val}")
        return "\n".join(lines) + "\n"


def _fmt_p(p: float) -> str:
    return f"{p:.2g}" if p < 0.001 else f"{p:.3f}"


def _listwise(columns: Mapping[str, np.ndarray]) -> tuple[np.ndarray, int]:
    n = len(next(iter(columns.values())))
    keep = np.ones(n, dtype=bool)
    for name, v in columns.items():
        v = np.asarray(v, dtype=np.float64)
        if len(v) != n:
            raise ValueError(f"column {name!r} has length {len(v)}, expected {n}")
        keep &= np.isfinite(v)
    return keep, int(n - keep.sum())


def _require(columns: Mapping[str, np.ndarray]) -> None:
    for name, v in columns.items():
        if len(v) and not np.any(np.isfinite(np.asarray(v, dtype=np.float64))):
            raise MissingCovariateError(f"required covariate {name!r} is missing for every record")


def _regression_report(analysis: str, dm: DesignMatrix, y: np.ndarray, n_deleted: int,
                       labels: dict[str, str]) -> tuple[StatReport, OlsFit]:
    fit = ols_fit(dm, y)
    inf = robust_inference(dm, fit)
    F, df1, df2 = f_statistic(fit.r2, fit.k - 1, fit.n)
    rows = [CoefRow(nm, float(b), float(s), float(z), float(p))
            for nm, b, s, z, p in zip(dm.names, fit.beta, inf.se, inf.z, inf.p)]
    block = FitBlock(fit.r2, cohens_f2(fit.r2), float(F), df1, df2, f_pvalue(F, df1, df2), fit.n, n_deleted)
    return StatReport(analysis, rows, block, labels=labels), fit


ANCOVA_LABELS = {"intercept": "Intercept", "group": "Group", "age": "Age", "sex": "Sex", "bmi": "BMI", "etiv": "eTIV"}


def ancova(gap, group, age, sex, bmi, etiv, analysis: str = "ancova", standardize_outcome: bool = True) -> StatReport:
    """Group comparison of ``gap`` adjusted for age, sex, BMI and eTIV.

    ``group`` is 0/1 (reference/other), ``sex`` is 0/1.  Rows with any
    missing value are dropped first.  Continuous variables (the gap too,
    unless ``standardize_outcome`` is false) are z-scored; ``extras`` gives
    the group coefficient back in the gap's original units.
    """
    cols = {"gap": gap, "group": group, "age": age, "sex": sex, "bmi": bmi, "etiv": etiv}
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
    _require(cols)
    keep, n_deleted = _listwise(cols)
    cols = {k: v[keep] for k, v in cols.items()}
    g = cols["group"]
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("group indicator must be 0/1")
    if g.sum() == 0 or g.sum() == len(g):
        raise InsufficientDataError(f"{analysis}: empty group after listwise deletion")
    y = cols["gap"]
    y_sd = 1.0
    if standardize_outcome:
        y, _, y_sd = zscore(y)
    dm = DesignMatrix.build(
        {k: cols[k] for k in ("group", "age", "sex", "bmi", "etiv")}, standardize=("age", "bmi", "etiv")
    )
    report, _ = _regression_report(analysis, dm, y, n_deleted, ANCOVA_LABELS)
    b = report.coefficient("group").beta
    report.extras = {
        "adjusted_difference": float(b * y_sd),
        "raw_mean_difference": float(cols["gap"][g == 1].mean() - cols["gap"][g == 0].mean()),
        "n_group0": int((g == 0).sum()),
        "n_group1": int((g == 1).sum()),
    }
    return report


INTERACTION_LABELS = {
    "intercept": "Intercept",
    "cpz": "Chlorpromazine equivalents",
    "duration": "Duration",
    "cpz_x_duration": "Chlorpromazine Equivalents x Duration",
    "age": "Age",
    "sex": "Sex",
    "etiv": "eTIV",
    "bmi": "BMI",
}


def interaction_regression(gap, cpz, duration, age, sex, etiv, bmi, analysis: str = "a3",
                           standardize_outcome: bool = False) -> StatReport:
    """Regression of ``gap`` on dose, duration, their interaction and covariates.

    Predictor order follows the published table: intercept, cpz, duration,
    cpz x duration, age, sex, eTIV, BMI.  Continuous predictors are z-scored
    and the interaction is the product of the two z-scored inputs.
    """
    cols = {"gap": gap, "cpz": cpz, "duration": duration, "age": age, "sex": sex, "etiv": etiv, "bmi": bmi}
    cols = {k: np.asarray(v, dtype=np.float64) for k, v in cols.items()}
    _require(cols)
    keep, n_deleted = _listwise(cols)
    cols = {k: v[keep] for k, v in cols.items()}
    n = int(keep.sum())
    if n <= 8:
        raise InsufficientDataError(f"{analysis}: n={n} after listwise deletion, need > 8")
    zc, *_ = zscore(cols["cpz"])
    zd, *_ = zscore(cols["duration"])
    y = zscore(cols["gap"])[0] if standardize_outcome else cols["gap"]
    dm = DesignMatrix.build(
        {"cpz": zc, "duration": zd, "cpz_x_duration": zc * zd, "age": cols["age"], "sex": cols["sex"],
         "etiv": cols["etiv"], "bmi": cols["bmi"]},
        standardize=("age", "etiv", "bmi"),
    )
    dm.normalization.update({"cpz": (float(cols["cpz"].mean()), float(cols["cpz"].std(ddof=1))),
                             "duration": (float(cols["duration"].mean()), float(cols["duration"].std(ddof=1)))})
    report, _ = _regression_report(analysis, dm, y, n_deleted, INTERACTION_LABELS)
    return report


# ---------------------------------------------------------------------------
# Mann-Whitney U
# ---------------------------------------------------------------------------

EXACT_MAX_TOTAL = 20


@lru_cache(maxsize=None)
def mwu_counts(n: int, m: int) -> tuple[int, ...]:
    """Number of rank arrangements giving each U in 0..n*m (no ties)."""
    if n == 0 or m == 0:
        return (1,)
    # Largest value belongs to the first sample (adds m to U) or the second.
    a = mwu_counts(n - 1, m)
    b = mwu_counts(n, m - 1)
    out = [0] * (n * m + 1)
    for u, c in enumerate(a):
        out[u + m] += c
    for u, c in enumerate(b):
        out[u] += c
    return tuple(out)


def mwu_exact_pvalue(u: float, n: int, m: int) -> float:
    """Two-sided exact p: P(|U - nm/2| >= |u - nm/2|) under the null."""
    counts = mwu_counts(n, m)
    dev = abs(2 * u - n * m)
    hits = sum(c for k, c in enumerate(counts) if abs(2 * k - n * m) >= dev)
    return hits / math.comb(n + m, n)


def mann_whitney_u(x, y) -> TestResult:
    """Two-sided Mann-Whitney test; U counts pairs with x > y plus half the ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, m = len(x), len(y)
    if n == 0 or m == 0:
        raise InsufficientDataError("Mann-Whitney U needs two nonempty samples")
    pooled = np.concatenate([x, y])
    ranks = sps.rankdata(pooled)
    U = float(ranks[:n].sum() - n * (n + 1) / 2.0)
    _, tie_sizes = np.unique(pooled, return_counts=True)
    N = n + m
    tie_term = float(np.sum(tie_sizes**3 - tie_sizes)) / (N * (N - 1)) if N > 1 else 0.0
    var = n * m / 12.0 * ((N + 1) - tie_term)
    d = U - n * m / 2.0
    if var > 0:
        z = math.copysign(max(abs(d) - 0.5, 0.0), d) / math.sqrt(var)
    else:
        z = 0.0
    has_ties = bool(np.any(tie_sizes > 1))
    if not has_ties and N <= EXACT_MAX_TOTAL:
        p, exact = mwu_exact_pvalue(U, n, m), True
    else:
        p, exact = (float(min(normal_two_sided_p(z), 1.0)) if var > 0 else 1.0), False
    return TestResult("U", U, float(z), float(p), abs(z) / math.sqrt(N), exact)


# ---------------------------------------------------------------------------
# Shapiro-Wilk (Royston's algorithm)
# ---------------------------------------------------------------------------

_C1 = (0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056)
_C2 = (0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633)
_C3 = (0.5440, -0.39978, 0.025054, -6.714e-4)
_C4 = (1.3822, -0.77857, 0.062767, -0.0020322)
_C5 = (-1.5861, -0.31082, -0.083751, 0.0038915)
_C6 = (-0.4803, -0.082676, 0.0030302)
_G = (-2.273, 0.459)


def _poly(coefs, x: float) -> float:
    return sum(c * x**i for i, c in enumerate(coefs))


@lru_cache(maxsize=64)
def _sw_coefficients(n: int) -> np.ndarray:
    """Antisymmetric weights a_1..a_n for the ordered sample (a_n > 0)."""
    half = n // 2
    if n == 3:
        upper = np.array([math.sqrt(0.5)])
    else:
        m = -special.ndtri((np.arange(1, half + 1) - 0.375) / (n + 0.25))  # positive, descending
        summ2 = 2.0 * float(m @ m)
        ssumm2 = math.sqrt(summ2)
        rsn = 1.0 / math.sqrt(n)
        a1 = _poly(_C1, rsn) + m[0] / ssumm2
        upper = m.copy()
        if n > 5:
            a2 = m[1] / ssumm2 + _poly(_C2, rsn)
            fac = math.sqrt((summ2 - 2 * m[0] ** 2 - 2 * m[1] ** 2) / (1 - 2 * a1**2 - 2 * a2**2))
            upper = m / fac
            upper[0], upper[1] = a1, a2
        else:
            fac = math.sqrt((summ2 - 2 * m[0] ** 2) / (1 - 2 * a1**2))
            upper = m / fac
            upper[0] = a1
    a = np.zeros(n)
    a[n - half :] = upper[::-1]
    a[:half] = -upper
    return a


def shapiro_wilk(x) -> TestResult:
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if not 3 <= n <= 5000:
        raise ValueError(f"Shapiro-Wilk needs 3 <= n <= 5000, got n={n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("Shapiro-Wilk input must be finite")
    xc = x - x.mean()
    ss = float(xc @ xc)
    if ss == 0 or x[-1] == x[0]:
        raise ValueError("Shapiro-Wilk is undefined for constant data")
    a = _sw_coefficients(n)
    W = min(float(a @ xc) ** 2 / ss, 1.0)
    if n == 3:
        p = 6.0 / math.pi * (math.asin(math.sqrt(W)) - math.pi / 3.0)
        return TestResult("W", W, None, float(min(max(p, 0.0), 1.0)))
    w1 = math.log1p(-W) if W < 1 else -math.inf
    if n <= 11:
        gamma = _poly(_G, n)
        if w1 >= gamma:
            return TestResult("W", W, None, 1e-99)
        y = -math.log(gamma - w1)
        mean = _poly(_C3, n)
        sd = math.exp(_poly(_C4, n))
    else:
        ln = math.log(n)
        y = w1
        mean = _poly(_C5, ln)
        sd = math.exp(_poly(_C6, ln))
    if math.isinf(y):
        return TestResult("W", W, None, 1.0)
    z = (y - mean) / sd
    return TestResult("W", W, float(z), float(special.ndtr(-z)))
