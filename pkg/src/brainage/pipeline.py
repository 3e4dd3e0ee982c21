"""End-to-end workflow: ingest, harmonize, train, predict, correct, analyze.

Every stage reads its inputs from and writes its artifact to one output
directory, so stages can be run one at a time (``brainage train`` ...) or
all at once (``brainage run``) with identical results.  ``run_pipeline``
simply calls the stage functions in order.

Artifacts (all deterministic for a fixed config)::

    model_creation.csv, application.csv   simulated inputs (when no CSVs given)
    validation.json                       cohort validation findings
    splits.json                           subject ids per train/val/test split
    harmonizer.bagc                       fitted site-harmonization model
    harmonized_{train,val,test,application}.csv
    model.bagc, training_history.csv
    predictions.csv                       raw predicted ages, every split
    bias_correction.json, calibration.csv, metrics.json, gaps.csv
    analysis_a{1..4}.json / .txt
    report.txt, manifest.json
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import stats
from .cohort import (
    CohortFormatError,
    CohortTable,
    Group,
    filter_age,
    parse_cohort_csv,
    simulate_cohort,
    split_train_val_test,
    validate_cohort,
    write_cohort_csv,
    default_sim_spec,
)
from .harmonize import apply_harmonizer, fit_harmonizer, save_harmonizer
from .model import (
    TrainConfig,
    apply_bias_correction,
    brain_age_gap,
    compute_metrics,
    fit_bias_correction,
    init_model,
    load_model,
    predict,
    save_model,
    train,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
ANALYSES = ("a1", "a2", "a3", "a4")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration (exit code 4)."""


class ValidationFailure(ValueError):
    """Input cohort fails validation (exit code 2)."""


class StageError(RuntimeError):
    """A pipeline stage failed (exit code 3)."""

    def __init__(self, stage: str, cause: str):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    seed: int
    out: str = "brainage_out"
    # Inputs.  When a path is empty the cohort is simulated from the sim_* keys.
    model_creation_csv: str | None = None
    application_csv: str | None = None
    sim_n_model: int = 1500
    sim_n_application: int = 600
    sim_n_sites: int = 3
    sim_noise_frac: float = 0.25
    sim_patient_gap: float = 0.0
    sim_bipolar_gap: float = 0.0
    sim_mix_ctrl: float = 0.4
    sim_mix_fe: float = 0.15
    sim_mix_sz: float = 0.25
    sim_mix_bp_ap: float = 0.1
    sim_mix_bp_noap: float = 0.1
    age_min: float = 18.0
    age_max: float = 65.0
    split_train: float = 0.8
    split_val: float = 0.1
    split_test: float = 0.1
    harmonize_df: int = 5
    harmonize_eb: bool = True
    harmonize_reference_site: str | None = None
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.1
    report_every: int = 10
    a1: bool = True
    a2: bool = True
    a3: bool = True
    a4: bool = True
    exclude_ids_a1: tuple[str, ...] = ()
    exclude_ids_a2: tuple[str, ...] = ()
    exclude_ids_a3: tuple[str, ...] = ()
    exclude_ids_a4: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if not self.age_min < self.age_max:
            raise ConfigError("age_min must be below age_max")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if abs(self.split_train + self.split_val + self.split_test - 1.0) > 1e-9:
            raise ConfigError("split fractions must sum to 1")

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           dropout=self.dropout, report_every=self.report_every)

    def enabled_analyses(self) -> list[str]:
        return [a for a in ANALYSES if getattr(self, a)]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def config_hash(self) -> str:
        """SHA-256 of every field except the output location."""
        d = self.to_dict()
        d.pop("out")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


_HINTS = typing.get_type_hints(PipelineConfig)


def _coerce(name: str, value):
    hint = _HINTS[name]
    args = typing.get_args(hint)
    if type(None) in args:
        if value is None or value == "":
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0", "yes", "no"):
            return value.lower() in ("true", "1", "yes")
    elif hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
    elif hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif hint is str:
        if isinstance(value, str):
            return value
    elif typing.get_origin(hint) is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if isinstance(value, (list, tuple)) and all(isinstance(v, str) for v in value):
            return tuple(v.strip() for v in value)
    label = getattr(hint, "__name__", None) if typing.get_origin(hint) is None else "list of strings"
    raise ConfigError(f"config key {name!r}: expected {label}, got {value!r}")


def make_config(values: dict) -> PipelineConfig:
    unknown = sorted(set(values) - set(_HINTS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if values.get("seed") is None:
        raise ConfigError("config must set 'seed'")
    return PipelineConfig(**{k: _coerce(k, v) for k, v in values.items()})


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    """Read a flat JSON object of config keys; ``overrides`` win over the file."""
    values = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("config must be a JSON object")
        nested = [k for k, v in values.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config must be flat; nested key(s): {', '.join(nested)}")
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return make_config(values)


# ---------------------------------------------------------------------------
# Small I/O helpers
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path):
    return json.loads(path.read_text(encoding="utf-8"))


def _write_rows(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _read_rows(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(stage, f"missing input artifact {path.name} (run the earlier stage first)")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


def _expected_stages(cfg: PipelineConfig) -> list[str]:
    return ["ingest", "harmonize", "train", "predict", "correct"] + [f"analyze:{a}" for a in cfg.enabled_analyses()]


def _update_manifest(cfg: PipelineConfig, out: Path, stage: str, ok: bool, error: str | None = None,
                     counts: dict | None = None) -> dict:
    path = out / "manifest.json"
    m = _read_json(path) if path.exists() else {}
    if m.get("config_hash") != cfg.config_hash():
        m = {}
    m.update({"package_version": __version__, "config_hash": cfg.config_hash(), "seed": cfg.seed,
              "config": {k: v for k, v in cfg.to_dict().items() if k != "out"}})
    m.setdefault("stages", {})
    m.setdefault("counts", {})
    m["stages"][stage] = "complete" if ok else "failed"
    if counts:
        m["counts"].update(counts)
    if error is not None:
        m["error"] = error
    elif ok and m.get("error", "").startswith(stage + ":"):
        m.pop("error")
    done = all(m["stages"].get(s) == "complete" for s in _expected_stages(cfg))
    m["status"] = "complete" if done and "error" not in m else "incomplete"
    _write_json(path, m)
    return m


def _stage(name: str):
    """Record stage outcome in the manifest; wrap unexpected errors as StageError."""

    def deco(fn):
        def wrapper(cfg: PipelineConfig, *args, **kwargs):
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            try:
                result, counts = fn(cfg, out, *args, **kwargs)
            except (StageError, ValidationFailure, ConfigError) as exc:
                _update_manifest(cfg, out, name, False, f"{name}: {exc}")
                raise
            except CohortFormatError as exc:
                err = ValidationFailure(str(exc))
                _update_manifest(cfg, out, name, False, f"{name}: {exc}")
                raise err from exc
            except (ValueError, RuntimeError, OSError, KeyError) as exc:
                err = StageError(name, str(exc))
                _update_manifest(cfg, out, name, False, str(err))
                raise err from exc
            _update_manifest(cfg, out, name, True, counts=counts)
            return result

        wrapper.__name__ = fn.__name__
        wrapper.__doc__ = fn.__doc__
        return wrapper

    return deco


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _sim_seeds(seed: int) -> tuple[int, int, int]:
    s = np.random.SeedSequence(seed).generate_state(3, dtype=np.uint32)
    return int(s[0]), int(s[1]), int(s[2])


def simulate_inputs(cfg: PipelineConfig, out: Path | None = None) -> tuple[CohortTable, CohortTable]:
    """Healthy multi-site model-creation cohort plus a single-site clinical cohort."""
    param_seed, model_seed, app_seed = _sim_seeds(cfg.seed)
    common = dict(n_sites=cfg.sim_n_sites, age_range=(cfg.age_min, cfg.age_max),
                  noise_frac=cfg.sim_noise_frac, param_seed=param_seed)
    model_spec = default_sim_spec(cfg.sim_n_model, model_seed, id_prefix="M", **common)
    mix = {Group.CONTROL: cfg.sim_mix_ctrl, Group.SCHIZOPHRENIA_FE: cfg.sim_mix_fe,
           Group.SCHIZOPHRENIA_CHRONIC: cfg.sim_mix_sz, Group.BIPOLAR_AP: cfg.sim_mix_bp_ap,
           Group.BIPOLAR_NO_AP: cfg.sim_mix_bp_noap}
    effect = {Group.SCHIZOPHRENIA_FE: cfg.sim_patient_gap, Group.SCHIZOPHRENIA_CHRONIC: cfg.sim_patient_gap,
              Group.BIPOLAR_AP: cfg.sim_bipolar_gap, Group.BIPOLAR_NO_AP: cfg.sim_bipolar_gap}
    app_spec = default_sim_spec(cfg.sim_n_application, app_seed, id_prefix="A",
                                group_mix={g: f for g, f in mix.items() if f > 0}, group_effect=effect, **common)
    app_spec = dataclasses.replace(app_spec, site_specs=app_spec.site_specs[:1])
    model_table, _ = simulate_cohort(model_spec)
    app_table, _ = simulate_cohort(app_spec)
    if out is not None:
        write_cohort_csv(model_table, out / "model_creation.csv")
        write_cohort_csv(app_table, out / "application.csv")
    return model_table, app_table


@_stage("simulate")
def stage_simulate(cfg: PipelineConfig, out: Path):
    m, a = simulate_inputs(cfg, out)
    return (m, a), {"simulated_model_creation": len(m), "simulated_application": len(a)}


def _input_paths(cfg: PipelineConfig, out: Path) -> tuple[Path, Path]:
    mc = Path(cfg.model_creation_csv) if cfg.model_creation_csv else out / "model_creation.csv"
    ap = Path(cfg.application_csv) if cfg.application_csv else out / "application.csv"
    return mc, ap


def _load_inputs(cfg: PipelineConfig, out: Path) -> tuple[CohortTable, CohortTable, dict, dict]:
    mc_path, ap_path = _input_paths(cfg, out)
    for p in (mc_path, ap_path):
        if not p.exists():
            raise ConfigError(f"input cohort {p} does not exist")
    bounds = (cfg.age_min, cfg.age_max)
    tables, findings, counts = {}, {}, {}
    for role, path in (("model_creation", mc_path), ("application", ap_path)):
        table = parse_cohort_csv(path)
        report = validate_cohort(table, bounds)
        findings[role] = [dataclasses.asdict(f) for f in report.findings]
        flat = report.of_kind("zero_variance_feature")
        if flat:
            raise ValidationFailure(f"{role} cohort: zero-variance feature(s) {[f.detail for f in flat][:5]}")
        kept = filter_age(table, bounds)
        counts[f"{role}_rows"] = len(table)
        counts[f"{role}_age_filtered"] = len(table) - len(kept)
        tables[role] = kept
    return tables["model_creation"], tables["application"], findings, counts


@_stage("ingest")
def stage_ingest(cfg: PipelineConfig, out: Path):
    """Validate inputs and write the stratified split assignment."""
    model_table, app_table, findings, counts = _load_inputs(cfg, out)
    _write_json(out / "validation.json", findings)
    parts = split_train_val_test(model_table, (cfg.split_train, cfg.split_val, cfg.split_test), seed=cfg.seed)
    _write_json(out / "splits.json", {name: p.subject_ids for name, p in zip(SPLITS, parts)})
    counts.update({f"n_{name}": len(p) for name, p in zip(SPLITS, parts)})
    counts["n_application"] = len(app_table)
    return (parts, app_table), counts


def _split_tables(cfg: PipelineConfig, out: Path, stage: str) -> tuple[dict, CohortTable]:
    model_table, app_table, _, _ = _load_inputs(cfg, out)
    ids = _read_json(_need(out / "splits.json", stage))
    pos = {sid: i for i, sid in enumerate(model_table.subject_ids)}
    try:
        parts = {name: model_table.subset([pos[s] for s in ids[name]], provenance=name) for name in SPLITS}
    except KeyError as exc:
        raise StageError(stage, f"splits.json names unknown subject {exc.args[0]!r}") from exc
    return parts, app_table


@_stage("harmonize")
def stage_harmonize(cfg: PipelineConfig, out: Path):
    """Fit the harmonizer on the training split; apply it to every table."""
    parts, app = _split_tables(cfg, out, "harmonize")
    model = fit_harmonizer(parts["train"], df=cfg.harmonize_df, eb_enabled=cfg.harmonize_eb,
                           reference_site=cfg.harmonize_reference_site)
    save_harmonizer(model, out / "harmonizer.bagc")
    harmonized = {name: apply_harmonizer(model, t) for name, t in {**parts, "application": app}.items()}
    for name, t in harmonized.items():
        write_cohort_csv(t, out / f"harmonized_{name}.csv")
    return harmonized, {}


def _harmonized(out: Path, names, stage: str) -> dict[str, CohortTable]:
    return {n: parse_cohort_csv(_need(out / f"harmonized_{n}.csv", stage)) for n in names}


@_stage("train")
def stage_train(cfg: PipelineConfig, out: Path):
    t = _harmonized(out, ("train", "val"), "train")
    model = init_model(seed=cfg.seed)
    model, history = train(model, t["train"], t["val"], cfg.train_config)
    save_model(model, out / "model.bagc")
    _write_rows(out / "training_history.csv", ["epoch", "train_loss", "val_mae"],
                ((h.epoch, h.train_loss, h.val_mae) for h in history))
    return (model, history), {}


@_stage("predict")
def stage_predict(cfg: PipelineConfig, out: Path):
    model = load_model(_need(out / "model.bagc", "predict"))
    tables = _harmonized(out, SPLITS + ("application",), "predict")
    rows = []
    for name, t in tables.items():
        pred = predict(model, t)
        rows.extend((name, sid, age, p) for sid, age, p in zip(t.subject_ids, t.ages, pred))
    _write_rows(out / "predictions.csv", ["set", "subject_id", "age", "predicted"], rows)
    return rows, {}


def _predictions(out: Path, stage: str) -> dict[str, dict[str, float]]:
    by_set: dict[str, dict[str, float]] = {}
    for r in _read_rows(_need(out / "predictions.csv", stage)):
        by_set.setdefault(r["set"], {})[r["subject_id"]] = float(r["predicted"])
    return by_set


@_stage("correct")
def stage_correct(cfg: PipelineConfig, out: Path):
    """Bias correction on healthy validation data; metrics, calibration data and gaps."""
    preds = _predictions(out, "correct")
    tables = _harmonized(out, ("val", "test", "application"), "correct")

    def vec(name):
        t = tables[name]
        return np.array([preds[name][s] for s in t.subject_ids])

    val = tables["val"]
    bc = fit_bias_correction(vec("val"), val.ages, fit_set="val")
    _write_json(out / "bias_correction.json", dataclasses.asdict(bc))
    calib, metrics = [], {}
    for name in ("val", "test"):
        t, raw = tables[name], vec(name)
        cor = apply_bias_correction(bc, raw)
        calib.extend((name, s, a, p, c) for s, a, p, c in zip(t.subject_ids, t.ages, raw, cor))
        metrics[name] = {
            "raw": compute_metrics(raw, t.ages, t.sex_codes).to_dict(),
            "corrected": compute_metrics(cor, t.ages, t.sex_codes).to_dict(),
        }
    _write_rows(out / "calibration.csv", ["set", "subject_id", "age", "predicted", "corrected"], calib)
    _write_json(out / "metrics.json", metrics)
    app = tables["application"]
    raw = vec("application")
    cor = apply_bias_correction(bc, raw)
    gap = brain_age_gap(cor, app.ages)
    rows = [(r.subject_id, r.site, r.group.value, r.age, r.sex.code, p, c, g)
            for r, p, c, g in zip(app.records, raw, cor, gap)]
    _write_rows(out / "gaps.csv", ["subject_id", "site", "group", "age", "sex", "predicted", "corrected", "gap"],
                rows)
    return (bc, metrics), {}


# ---------------------------------------------------------------------------
# Analyses
# ---------------------------------------------------------------------------

ANALYSIS_TITLES = {
    "a1": "Analysis 1: schizophrenia (FE + chronic) vs controls, ANCOVA on Brain Age Gap",
    "a2": "Analysis 2: first-episode schizophrenia vs controls, ANCOVA on Brain Age Gap",
    "a3": "Analysis 3: chronic schizophrenia, Brain Age Gap on medication x duration",
    "a4": "Analysis 4: bipolar disorder with vs without antipsychotics, Mann-Whitney U",
}


@dataclass(frozen=True)
class GapTable:
    """Application cohort joined with its Brain Age Gaps."""

    table: CohortTable
    gap: np.ndarray

    def select(self, groups, exclude=()) -> tuple["GapTable", int]:
        excl = set(exclude)
        idx = [i for i, r in enumerate(self.table.records) if r.group in groups]
        keep = [i for i in idx if self.table.records[i].subject_id not in excl]
        return GapTable(self.table.subset(keep), self.gap[keep]), len(idx) - len(keep)


def load_gaps(out: Path, stage: str) -> GapTable:
    app = _harmonized(out, ("application",), stage)["application"]
    gaps = {r["subject_id"]: float(r["gap"]) for r in _read_rows(_need(out / "gaps.csv", stage))}
    try:
        return GapTable(app, np.array([gaps[s] for s in app.subject_ids]))
    except KeyError as exc:
        raise StageError(stage, f"gaps.csv has no row for subject {exc.args[0]!r}") from exc


def _require_covariates(label: str, t: CohortTable, names) -> None:
    for name in names:
        if len(t) and np.all(np.isnan(t.covariate(name))):
            raise StageError(label, f"missing covariate {name!r} (empty for every record)")


def run_analysis(name: str, gaps: GapTable, exclude=()) -> stats.StatReport:
    """Compute one of the four analyses on the application cohort."""
    label = f"analysis {name[1:]}"
    if name in ("a1", "a2"):
        patients = {Group.SCHIZOPHRENIA_FE} if name == "a2" else {Group.SCHIZOPHRENIA_FE,
                                                                   Group.SCHIZOPHRENIA_CHRONIC}
        sel, n_excluded = gaps.select(patients | {Group.CONTROL}, exclude)
        t = sel.table
        group = np.array([0.0 if r.group is Group.CONTROL else 1.0 for r in t.records])
        if len(t) == 0 or group.sum() == 0 or group.sum() == len(group):
            raise StageError(label, "empty group")
        _require_covariates(label, t, ("bmi", "etiv"))
        try:
            rep = stats.ancova(sel.gap, group, t.ages, t.sex_codes, t.covariate("bmi"), t.covariate("etiv"),
                               analysis=ANALYSIS_TITLES[name])
        except stats.InsufficientDataError as exc:
            raise StageError(label, "empty group after listwise deletion") from exc
    elif name == "a3":
        sel, n_excluded = gaps.select({Group.SCHIZOPHRENIA_CHRONIC}, exclude)
        t = sel.table
        if len(t) == 0:
            raise StageError(label, "empty group")
        _require_covariates(label, t, ("duration_months", "cpz_equiv", "bmi", "etiv"))
        try:
            rep = stats.interaction_regression(sel.gap, t.covariate("cpz_equiv"), t.covariate("duration_months"),
                                               t.ages, t.sex_codes, t.covariate("etiv"), t.covariate("bmi"),
                                               analysis=ANALYSIS_TITLES[name])
        except stats.InsufficientDataError as exc:
            raise StageError(label, str(exc)) from exc
    elif name == "a4":
        sel, n_excluded = gaps.select({Group.BIPOLAR_AP, Group.BIPOLAR_NO_AP}, exclude)
        ap = np.array([r.group is Group.BIPOLAR_AP for r in sel.table.records], dtype=bool)
        if ap.sum() == 0 or (~ap).sum() == 0:
            raise StageError(label, "empty group")
        test = stats.mann_whitney_u(sel.gap[ap], sel.gap[~ap])
        rep = stats.StatReport(ANALYSIS_TITLES[name], test=test,
                               extras={"n_group0": int((~ap).sum()), "n_group1": int(ap.sum()),
                                       "n_used": int(len(ap)), "n_deleted": 0})
    else:
        raise ConfigError(f"unknown analysis {name!r}; choose from {', '.join(ANALYSES)}")
    rep.extras["n_excluded"] = n_excluded
    return rep


def stage_analyze(cfg: PipelineConfig, names=None, exclude: dict | None = None) -> dict[str, stats.StatReport]:
    names = list(names) if names else cfg.enabled_analyses()
    reports = {}
    for name in names:
        reports[name] = _analyze_one(cfg, name, (exclude or {}).get(name))
    return reports


def _analyze_one(cfg: PipelineConfig, name: str, exclude=None):
    @_stage(f"analyze:{name}")
    def go(cfg, out):
        excl = exclude if exclude is not None else getattr(cfg, f"exclude_ids_{name}")
        rep = run_analysis(name, load_gaps(out, f"analysis {name[1:]}"), excl)
        (out / f"analysis_{name}.json").write_text(rep.to_json(), encoding="utf-8")
        (out / f"analysis_{name}.txt").write_text(rep.to_text(), encoding="utf-8")
        if rep.fit is not None:
            counts = {f"{name}_n_used": rep.fit.n_used, f"{name}_n_deleted": rep.fit.n_deleted}
        else:
            counts = {f"{name}_n_used": rep.extras["n_used"], f"{name}_n_deleted": 0}
        counts[f"{name}_n_excluded"] = rep.extras["n_excluded"]
        return rep, counts

    return go(cfg)


# ---------------------------------------------------------------------------
# Bundle
# ---------------------------------------------------------------------------


@dataclass
class ReportBundle:
    metrics: dict
    calibration: list[dict]
    reports: dict[str, dict]
    manifest: dict
    out: Path = field(default=None)


def stage_report(cfg: PipelineConfig) -> ReportBundle:
    """Assemble the human-readable summary and finalize the manifest."""
    out = Path(cfg.out)
    metrics = _read_json(_need(out / "metrics.json", "report"))
    calibration = _read_rows(_need(out / "calibration.csv", "report"))
    reports = {a: _read_json(out / f"analysis_{a}.json") for a in ANALYSES if (out / f"analysis_{a}.json").exists()}
    lines = ["Brain age pipeline report", ""]
    for name in ("val", "test"):
        for kind in ("raw", "corrected"):
            m = metrics[name][kind]
            lines.append(f"{name:4s} {kind:9s} MAE = {m['mae']:.2f} years, r = {m['pearson_r']:.2f} (n = {m['n']})")
            for sex, ms in m.get("by_sex", {}).items():
                lines.append(f"{'':15s}{sex:6s} MAE = {ms['mae']:.2f}, r = {ms['pearson_r']:.2f} (n = {ms['n']})")
    for a in reports:
        lines.append("")
        lines.append((out / f"analysis_{a}.txt").read_text(encoding="utf-8").rstrip("\n"))
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = _read_json(_need(out / "manifest.json", "report"))
    artifacts = sorted(p.name for p in out.iterdir() if p.is_file() and p.name != "manifest.json")
    manifest["artifacts"] = {n: _sha256(out / n) for n in artifacts}
    _write_json(out / "manifest.json", manifest)
    return ReportBundle(metrics, calibration, reports, manifest, out)


def run_pipeline(cfg: PipelineConfig) -> ReportBundle:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if not (cfg.model_creation_csv and cfg.application_csv):
        stage_simulate(cfg)
    stage_ingest(cfg)
    stage_harmonize(cfg)
    stage_train(cfg)
    stage_predict(cfg)
    stage_correct(cfg)
    stage_analyze(cfg)
    return stage_report(cfg)

