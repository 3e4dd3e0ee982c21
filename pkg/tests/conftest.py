import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from brainage.cohort import N_FEATURES, CohortTable, Group, Sex, SiteSpec, SimSpec, SubjectRecord

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_record(i: int, age: float = 40.0, sex: Sex = Sex.FEMALE, group: Group = Group.CONTROL,
                site: str = "site1", features=None, **cov) -> SubjectRecord:
    if features is None:
        features = np.arange(N_FEATURES, dtype=float) + i
    defaults = {"bmi": 24.0, "etiv": 1.5, "duration_months": None, "cpz_equiv": None}
    defaults.update(cov)
    return SubjectRecord(f"S{i:03d}", site, age, sex, group, features=features, **defaults)


def random_table(n: int, seed: int = 0, sites=("site1",)) -> CohortTable:
    rng = np.random.default_rng(seed)
    recs = [
        make_record(i, age=float(rng.uniform(18, 65)), sex=Sex.MALE if i % 2 else Sex.FEMALE,
                    site=sites[i % len(sites)], features=rng.normal(1000, 50, N_FEATURES),
                    etiv=float(rng.normal(1.5, 0.1)))
        for i in range(n)
    ]
    return CohortTable(recs)


def linear_spec(n: int, seed: int, noise_sd=1.0, sites=None, **kw) -> SimSpec:
    """Simple spec with loadings 0.5 + small per-feature variation and unit-scale sites."""
    rng = np.random.default_rng(1234)
    loadings = 0.5 + 0.1 * rng.standard_normal(N_FEATURES)
    if sites is None:
        sites = [SiteSpec("site1", np.zeros(N_FEATURES), np.ones(N_FEATURES))]
    return SimSpec(n_subjects=n, site_specs=sites, age_range=(18.0, 65.0), age_loadings=loadings,
                   noise_sd=noise_sd, seed=seed, baseline=np.full(N_FEATURES, 100.0), **kw)


@pytest.fixture
def small_table():
    return random_table(40, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[key])
