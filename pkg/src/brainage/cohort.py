"""Cohort tables: CSV ingestion, validation, splitting and synthesis.

A cohort is an immutable, ordered collection of :class:`SubjectRecord` rows
that all share the same 175-name feature manifest.  Clinical covariates
that were not recorded are stored as ``None``; features may never be
missing.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

N_FEATURES = 175
FEATURE_NAMES = tuple(f"feat_{i:03d}" for i in range(N_FEATURES))
CLINICAL_COLUMNS = ("subject_id", "site", "age", "sex", "group", "bmi", "etiv", "duration_months", "cpz_equiv")
CSV_HEADER = CLINICAL_COLUMNS + FEATURE_NAMES
OPTIONAL_COVARIATES = ("bmi", "etiv", "duration_months", "cpz_equiv")
DEFAULT_AGE_BOUNDS = (18.0, 65.0)


class Sex(enum.Enum):
    MALE = "M"
    FEMALE = "F"

    @property
    def code(self) -> int:
        """Design-matrix coding: male=1, female=0."""
        return 1 if self is Sex.MALE else 0


class Group(enum.Enum):
    CONTROL = "CTRL"
    SCHIZOPHRENIA_FE = "FE"
    SCHIZOPHRENIA_CHRONIC = "SZ"
    BIPOLAR_AP = "BP_AP"
    BIPOLAR_NO_AP = "BP_NOAP"


class CohortFormatError(ValueError):
    """A cohort CSV violates the schema.  ``row``/``column`` are 1-based file positions."""

    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.row = row
        self.column = column


@dataclass(frozen=True, eq=False)
class SubjectRecord:
    subject_id: str
    site: str
    age: float
    sex: Sex
    group: Group
    bmi: float | None
    etiv: float | None
    duration_months: float | None
    cpz_equiv: float | None
    features: np.ndarray

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64)
        if feats.shape != (N_FEATURES,):
            raise ValueError(f"subject {self.subject_id!r}: feature count {feats.size} != {N_FEATURES}")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"subject {self.subject_id!r}: non-finite feature value")
        feats.setflags(write=False)
        object.__setattr__(self, "features", feats)


@dataclass(frozen=True, eq=False)
class CohortTable:
    records: tuple[SubjectRecord, ...]
    feature_names: tuple[str, ...] = FEATURE_NAMES
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(self.feature_names) != N_FEATURES:
            raise ValueError(f"feature manifest has {len(self.feature_names)} names, expected {N_FEATURES}")
        seen: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            if rec.subject_id in seen:
                raise ValueError(f"duplicate subject_id {rec.subject_id!r} at records {seen[rec.subject_id]} and {i}")
            seen[rec.subject_id] = i

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @cached_property
    def features(self) -> np.ndarray:
        """Feature matrix, shape (n, 175); read-only."""
        if not self.records:
            out = np.empty((0, N_FEATURES))
        else:
            out = np.stack([r.features for r in self.records])
        out.setflags(write=False)
        return out

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    @property
    def sites(self) -> list[str]:
        return [r.site for r in self.records]

    @property
    def ages(self) -> np.ndarray:
        return np.array([r.age for r in self.records], dtype=np.float64)

    @property
    def sex_codes(self) -> np.ndarray:
        return np.array([r.sex.code for r in self.records], dtype=np.float64)

    @property
    def groups(self) -> list[Group]:
        return [r.group for r in self.records]

    def covariate(self, name: str) -> np.ndarray:
        """Column of an optional covariate as floats, NaN where missing."""
        if name not in OPTIONAL_COVARIATES:
            raise KeyError(name)
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name) for r in self.records])

    def subset(self, indices: Iterable[int], provenance: str | None = None) -> "CohortTable":
        recs = [self.records[i] for i in indices]
        return CohortTable(recs, self.feature_names, self.provenance if provenance is None else provenance)

    def filter(self, keep: Callable[[SubjectRecord], bool], provenance: str | None = None) -> "CohortTable":
        return self.subset([i for i, r in enumerate(self.records) if keep(r)], provenance)

    def with_features(self, matrix: np.ndarray, provenance: str | None = None) -> "CohortTable":
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (len(self), N_FEATURES):
            raise ValueError(f"feature matrix shape {matrix.shape} does not match table ({len(self)}, {N_FEATURES})")
        recs = [replace(r, features=matrix[i]) for i, r in enumerate(self.records)]
        return CohortTable(recs, self.feature_names, self.provenance if provenance is None else provenance)

    def concat(self, other: "CohortTable") -> "CohortTable":
        if other.feature_names != self.feature_names:
            raise ValueError("cannot concatenate tables with different feature manifests")
        return CohortTable(self.records + other.records, self.feature_names, self.provenance)


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------


def _parse_float(cell: str, row: int, col: int, name: str, *, optional: bool) -> float | None:
    cell = cell.strip()
    if cell == "":
        if optional:
            return None
        raise CohortFormatError(f"missing value for {name!r}", row, col)
    try:
        value = float(cell)
    except ValueError:
        raise CohortFormatError(f"non-numeric value {cell!r} for {name!r}", row, col) from None
    if not math.isfinite(value):
        raise CohortFormatError(f"non-finite value {cell!r} for {name!r}", row, col)
    return value


def parse_cohort_csv(path) -> CohortTable:
    """Read a cohort CSV.

    Raises
    ------
    CohortFormatError
        On a malformed header, a non-numeric or non-finite feature cell, a
        duplicate ``subject_id`` or a row with the wrong number of feature
        cells.  The message carries the 1-based file row and column.
    """
    path = Path(path)
    records = []
    first_row: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CohortFormatError("empty file, expected header", 1) from None
        header = [h.strip() for h in header]
        if tuple(header) != CSV_HEADER:
            for j, (got, want) in enumerate(zip(header, CSV_HEADER)):
                if got != want:
                    raise CohortFormatError(f"malformed header: expected {want!r}, found {got!r}", 1, j + 1)
            raise CohortFormatError(
                f"malformed header: expected {len(CSV_HEADER)} columns, found {len(header)}", 1
            )
        n_clin = len(CLINICAL_COLUMNS)
        for rownum, row in enumerate(reader, start=2):
            if not row or all(c.strip() == "" for c in row):
                continue
            if len(row) < n_clin:
                raise CohortFormatError(f"expected at least {n_clin} clinical cells, found {len(row)}", rownum)
            n_feat = len(row) - n_clin
            if n_feat != N_FEATURES:
                raise CohortFormatError(f"feature count {n_feat} != {N_FEATURES}", rownum)
            sid = row[0].strip()
            if sid == "":
                raise CohortFormatError("empty subject_id", rownum, 1)
            if sid in first_row:
                raise CohortFormatError(f"duplicate subject_id {sid!r} on rows {first_row[sid]} and {rownum}", rownum, 1)
            first_row[sid] = rownum
            site = row[1].strip()
            if site == "":
                raise CohortFormatError("empty site label", rownum, 2)
            age = _parse_float(row[2], rownum, 3, "age", optional=False)
            if age < 0:
                raise CohortFormatError(f"negative age {age}", rownum, 3)
            try:
                sex = Sex(row[3].strip())
            except ValueError:
                raise CohortFormatError(f"sex must be M or F, found {row[3]!r}", rownum, 4) from None
            try:
                group = Group(row[4].strip())
            except ValueError:
                codes = ",".join(g.value for g in Group)
                raise CohortFormatError(f"group must be one of {codes}, found {row[4]!r}", rownum, 5) from None
            clinical = {}
            for j, name in enumerate(OPTIONAL_COVARIATES, start=5):
                clinical[name] = _parse_float(row[j], rownum, j + 1, name, optional=True)
            feats = [
                _parse_float(cell, rownum, n_clin + k + 1, FEATURE_NAMES[k], optional=False)
                for k, cell in enumerate(row[n_clin:])
            ]
            records.append(SubjectRecord(sid, site, age, sex, group, features=np.array(feats), **clinical))
    return CohortTable(records, FEATURE_NAMES, provenance=f"csv:{path.name}")


def _fmt(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def write_cohort_csv(table: CohortTable, path) -> None:
    """Write ``table`` in the cohort CSV schema; floats use shortest round-trip repr."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in table.records:
            writer.writerow(
                [r.subject_id, r.site, _fmt(r.age), r.sex.value, r.group.value]
                + [_fmt(getattr(r, c)) for c in OPTIONAL_COVARIATES]
                + [repr(float(v)) for v in r.features]
            )


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

# Groups entering each analysis and the optional covariates each one needs.
ANALYSIS_REQUIREMENTS: dict[str, tuple[frozenset[Group], tuple[str, ...]]] = {
    "a1": (
        frozenset({Group.CONTROL, Group.SCHIZOPHRENIA_FE, Group.SCHIZOPHRENIA_CHRONIC}),
        ("bmi", "etiv"),
    ),
    "a2": (frozenset({Group.CONTROL, Group.SCHIZOPHRENIA_FE}), ("bmi", "etiv")),
    "a3": (frozenset({Group.SCHIZOPHRENIA_CHRONIC}), ("bmi", "etiv", "duration_months", "cpz_equiv")),
    "a4": (frozenset({Group.BIPOLAR_AP, Group.BIPOLAR_NO_AP}), ()),
}


@dataclass(frozen=True)
class Finding:
    kind: str  # "age_out_of_range" | "missing_covariate" | "zero_variance_feature"
    subject: str | None
    detail: str
    analysis: str | None = None


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def of_kind(self, kind: str) -> list[Finding]:
        return [f for f in self.findings if f.kind == kind]

    def __len__(self) -> int:
        return len(self.findings)


def validate_cohort(table: CohortTable, bounds: tuple[float, float] = DEFAULT_AGE_BOUNDS) -> ValidationReport:
    lo, hi = bounds
    report = ValidationReport()
    for r in table.records:
        if not lo <= r.age <= hi:
            report.findings.append(Finding("age_out_of_range", r.subject_id, f"age {r.age} outside [{lo}, {hi}]"))
    for analysis, (groups, needed) in ANALYSIS_REQUIREMENTS.items():
        for r in table.records:
            if r.group not in groups:
                continue
            for name in needed:
                if getattr(r, name) is None:
                    report.findings.append(Finding("missing_covariate", r.subject_id, name, analysis))
    if len(table) >= 2:
        X = table.features
        flat = np.flatnonzero(X.max(axis=0) == X.min(axis=0))
        for j in flat:
            report.findings.append(Finding("zero_variance_feature", None, table.feature_names[j]))
    return report


def filter_age(table: CohortTable, bounds: tuple[float, float] = DEFAULT_AGE_BOUNDS) -> CohortTable:
    lo, hi = bounds
    return table.filter(lambda r: lo <= r.age <= hi)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Apportion ``n`` items by Hamilton's method; ties go to the earlier part."""
    quotas = [n * f for f in fractions]
    sizes = [math.floor(q + 1e-9) for q in quotas]
    remainder = n - sum(sizes)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:remainder]:
        sizes[i] += 1
    return sizes


def _age_deciles(ages: np.ndarray) -> np.ndarray:
    ranks = np.empty(len(ages), dtype=np.int64)
    ranks[np.argsort(ages, kind="stable")] = np.arange(len(ages))
    return (10 * ranks) // len(ages)


def split_train_val_test(
    table: CohortTable, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0
) -> tuple[CohortTable, CohortTable, CohortTable]:
    """Stratified (sex x age decile) random split into train/val/test.

    Part sizes follow largest-remainder rounding of ``n * fractions``.  Records
    are shuffled within each stratum and the concatenated strata are dealt
    out sequentially to whichever part is furthest behind its quota, which
    keeps each stratum's allocation close to the requested proportions.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)!r}")
    n = len(table)
    if n < 3:
        raise ValueError(f"cannot split a table of {n} records into three parts")
    targets = largest_remainder(n, fractions)

    rng = np.random.default_rng(seed)
    deciles = _age_deciles(table.ages)
    sexes = table.sex_codes.astype(int)
    strata: dict[tuple[int, int], list[int]] = {}
    for i in range(n):
        strata.setdefault((int(sexes[i]), int(deciles[i])), []).append(i)
    sequence: list[int] = []
    for key in sorted(strata):
        members = np.array(strata[key])
        sequence.extend(members[rng.permutation(len(members))].tolist())

    counts = [0, 0, 0]
    parts: list[list[int]] = [[], [], []]
    for k, idx in enumerate(sequence):
        best, best_deficit = -1, -math.inf
        for p in range(3):
            if counts[p] >= targets[p]:
                continue
            deficit = (k + 1) * fractions[p] - counts[p]
            if deficit > best_deficit:
                best, best_deficit = p, deficit
        parts[best].append(idx)
        counts[best] += 1
    names = ("train", "val", "test")
    return tuple(table.subset(sorted(p), f"{table.provenance}|{nm}") for p, nm in zip(parts, names))


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SiteSpec:
    label: str
    location: np.ndarray  # additive shift per feature
    scale: np.ndarray  # multiplicative noise factor per feature, > 0


@dataclass(frozen=True, eq=False)
class SimSpec:
    """Generative parameters of a synthetic cohort.

    Each feature is drawn as::

        baseline + age_loading * (age + group_years[group])
                 + sex_loading * sex + etiv_loading * (etiv - 1.55)
                 + site_location + site_scale * eps,   eps ~ N(0, noise_sd)

    ``group_effect`` maps a group to extra "years of ageing", so a group
    offset moves features along the ageing direction and is recovered as a
    Brain Age Gap of the same size.  ``sex_loadings`` and ``etiv_loadings``
    default to zero.
    """

    n_subjects: int
    site_specs: Sequence[SiteSpec]
    age_range: tuple[float, float]
    age_loadings: np.ndarray
    noise_sd: np.ndarray | float
    seed: int
    group_effect: Mapping[Group, float] = field(default_factory=dict)
    group_mix: Mapping[Group, float] = field(default_factory=lambda: {Group.CONTROL: 1.0})
    baseline: np.ndarray | None = None
    sex_loadings: np.ndarray | None = None
    etiv_loadings: np.ndarray | None = None
    id_prefix: str = "S"


@dataclass(frozen=True, eq=False)
class GroundTruth:
    spec: SimSpec
    baseline: np.ndarray
    age_loadings: np.ndarray
    sex_loadings: np.ndarray
    etiv_loadings: np.ndarray
    noise_sd: np.ndarray
    site_index: np.ndarray  # per subject, index into spec.site_specs
    group_years: np.ndarray  # per subject injected ageing offset
    noise: np.ndarray  # per subject raw N(0, noise_sd) draws before site scaling


ETIV_CENTER = 1.55


def _vec(value, name: str) -> np.ndarray:
    arr = np.broadcast_to(np.asarray(value, dtype=np.float64), (N_FEATURES,)).copy()
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite")
    return arr


def simulate_cohort(spec: SimSpec) -> tuple[CohortTable, GroundTruth]:
    """Draw a synthetic cohort from ``spec``; bit-identical for a fixed seed."""
    if spec.n_subjects < 1:
        raise ValueError("n_subjects must be >= 1")
    if not spec.site_specs:
        raise ValueError("at least one site is required")
    lo, hi = spec.age_range
    if not (0 <= lo <= hi):
        raise ValueError(f"invalid age_range {spec.age_range}")
    loadings = _vec(spec.age_loadings, "age_loadings")
    noise_sd = _vec(spec.noise_sd, "noise_sd")
    if np.any(noise_sd < 0):
        raise ValueError("noise_sd must be >= 0")
    baseline = _vec(0.0 if spec.baseline is None else spec.baseline, "baseline")
    sex_l = _vec(0.0 if spec.sex_loadings is None else spec.sex_loadings, "sex_loadings")
    etiv_l = _vec(0.0 if spec.etiv_loadings is None else spec.etiv_loadings, "etiv_loadings")
    locs = np.stack([_vec(s.location, f"site {s.label} location") for s in spec.site_specs])
    scales = np.stack([_vec(s.scale, f"site {s.label} scale") for s in spec.site_specs])
    if np.any(scales <= 0):
        raise ValueError("site scale factors must be > 0")
    if len({s.label for s in spec.site_specs}) != len(spec.site_specs):
        raise ValueError("site labels must be unique")
    mix_groups = list(spec.group_mix)
    mix = np.array([spec.group_mix[g] for g in mix_groups], dtype=np.float64)
    if np.any(mix < 0) or mix.sum() <= 0:
        raise ValueError("group_mix weights must be non-negative with a positive sum")

    n = spec.n_subjects
    rng = np.random.default_rng(spec.seed)
    site_idx = rng.permutation(np.resize(np.arange(len(spec.site_specs)), n))
    counts = largest_remainder(n, (mix / mix.sum()).tolist())
    group_idx = rng.permutation(np.repeat(np.arange(len(mix_groups)), counts))
    groups = [mix_groups[k] for k in group_idx]
    ages = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, float(lo))
    male = rng.random(n) < 0.5
    bmi = np.clip(rng.normal(25.0, 4.0, size=n), 15.0, 50.0)
    etiv = np.clip(rng.normal(ETIV_CENTER, 0.15, size=n), 1.0, 2.2)
    dur_raw = rng.exponential(1.0, size=n)
    cpz_raw = rng.gamma(4.0, 1.0, size=n)
    eps = rng.standard_normal((n, N_FEATURES)) * noise_sd

    group_years = np.array([float(spec.group_effect.get(g, 0.0)) for g in groups])
    X = (
        baseline
        + np.outer(ages + group_years, loadings)
        + np.outer(male.astype(np.float64), sex_l)
        + np.outer(etiv - ETIV_CENTER, etiv_l)
        + locs[site_idx]
        + scales[site_idx] * eps
    )

    duration_mean = {Group.SCHIZOPHRENIA_FE: 11.0, Group.SCHIZOPHRENIA_CHRONIC: 130.0,
                     Group.BIPOLAR_AP: 180.0, Group.BIPOLAR_NO_AP: 230.0}
    cpz_mean = {Group.SCHIZOPHRENIA_FE: 330.0, Group.SCHIZOPHRENIA_CHRONIC: 430.0, Group.BIPOLAR_AP: 290.0}
    width = len(str(n))
    records = []
    for i in range(n):
        g = groups[i]
        duration = float(dur_raw[i] * duration_mean[g]) if g in duration_mean else None
        if g in cpz_mean:
            cpz = float(cpz_raw[i] * cpz_mean[g] / 4.0)
        elif g is Group.BIPOLAR_NO_AP:
            cpz = 0.0
        else:
            cpz = None
        records.append(
            SubjectRecord(
                subject_id=f"{spec.id_prefix}{i + 1:0{width}d}",
                site=spec.site_specs[site_idx[i]].label,
                age=float(ages[i]),
                sex=Sex.MALE if male[i] else Sex.FEMALE,
                group=g,
                bmi=float(bmi[i]),
                etiv=float(etiv[i]),
                duration_months=duration,
                cpz_equiv=cpz,
                features=X[i],
            )
        )
    table = CohortTable(records, FEATURE_NAMES, provenance=f"simulated:seed={spec.seed}")
    truth = GroundTruth(spec, baseline, loadings, sex_l, etiv_l, noise_sd, site_idx, group_years, eps)
    return table, truth


def default_sim_spec(
    n_subjects: int,
    seed: int,
    *,
    n_sites: int = 3,
    age_range: tuple[float, float] = DEFAULT_AGE_BOUNDS,
    noise_frac: float = 0.05,
    site_shift_frac: float = 0.03,
    site_scale_range: tuple[float, float] = (0.8, 1.25),
    group_mix: Mapping[Group, float] | None = None,
    group_effect: Mapping[Group, float] | None = None,
    id_prefix: str = "S",
    param_seed: int | None = None,
) -> SimSpec:
    """Plausible volumetric generative parameters (mm^3 scale).

    ``param_seed`` fixes the feature-level parameters (baselines, loadings,
    site effects) independently of the subject draws, so several cohorts can
    share one "brain" and one set of scanners.
    """
    prng = np.random.default_rng(seed if param_seed is None else param_seed)
    baseline = prng.uniform(1_000.0, 20_000.0, N_FEATURES)
    loadings = -baseline * prng.uniform(0.001, 0.006, N_FEATURES)
    sex_l = baseline * prng.normal(0.0, 0.04, N_FEATURES)
    etiv_l = baseline * prng.uniform(0.2, 0.6, N_FEATURES)
    sites = [
        SiteSpec(
            f"site{k + 1}",
            baseline * prng.normal(0.0, site_shift_frac, N_FEATURES),
            prng.uniform(*site_scale_range, N_FEATURES),
        )
        for k in range(n_sites)
    ]
    return SimSpec(
        n_subjects=n_subjects,
        site_specs=sites,
        age_range=age_range,
        age_loadings=loadings,
        noise_sd=baseline * noise_frac,
        seed=seed,
        group_effect=dict(group_effect or {}),
        group_mix=dict(group_mix or {Group.CONTROL: 1.0}),
        baseline=baseline,
        sex_loadings=sex_l,
        etiv_loadings=etiv_l,
        id_prefix=id_prefix,
    )
