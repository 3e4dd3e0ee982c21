"""Seeded synthetic inputs shared by the stats tests and the acceptance suite."""

import numpy as np


def chronic_cohort(seed: int = 51, n: int = 51, n_missing: int = 6, duration_effect: float = 0.0):
    """Chronic-patient columns for the interaction regression.

    ``n_missing`` rows lose either cpz or duration so listwise deletion
    leaves ``n - n_missing`` complete cases.
    """
    rng = np.random.default_rng(seed)
    cpz = rng.gamma(2.0, 200.0, n)
    duration = rng.uniform(12, 360, n)
    age = rng.uniform(25, 60, n)
    sex = (rng.random(n) < 0.6).astype(float)
    etiv = rng.normal(1.55, 0.15, n)
    bmi = rng.normal(27, 4, n)
    zdur = (duration - duration.mean()) / duration.std(ddof=1)
    gap = duration_effect * zdur + rng.normal(0, 1, n)
    miss = rng.choice(n, n_missing, replace=False)
    cpz[miss[: n_missing // 2]] = np.nan
    duration[miss[n_missing // 2 :]] = np.nan
    return {"gap": gap, "cpz": cpz, "duration": duration, "age": age, "sex": sex, "etiv": etiv, "bmi": bmi}


def ancova_sample(seed: int, n_per_group: int = 400, effect: float = 0.0, noise_sd: float = 5.0):
    """Controls (group 0) and patients (group 1) with covariates independent of group."""
    rng = np.random.default_rng(seed)
    n = 2 * n_per_group
    group = np.repeat([0.0, 1.0], n_per_group)
    age = rng.uniform(18, 65, n)
    sex = (rng.random(n) < 0.5).astype(float)
    bmi = rng.normal(25, 4, n)
    etiv = rng.normal(1.55, 0.15, n)
    gap = effect * group + 0.1 * (age - 40) + rng.normal(0, noise_sd, n)
    return {"gap": gap, "group": group, "age": age, "sex": sex, "bmi": bmi, "etiv": etiv}
