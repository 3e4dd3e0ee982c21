"""Tabular-transformer brain-age regressor.

Architecture (defaults)::

    175 features, each z-scored with train-set statistics
      -> per-feature Linear(1 -> 32) + ReLU + Dropout      175 tokens x 32
      -> 2 x post-norm encoder layer:
             x = LN(x + Dropout(MHA(x)))                   4 heads x 8
             x = LN(x + Dropout(W2 Dropout(ReLU(W1 x))))   32 -> 64 -> 32
      -> concatenate tokens                                5600
      -> Linear(5600 -> 1), rescaled to years by train-set age mean/sd

The output rescaling is a fixed affine map stored with the model; the loss
is the mean squared error in years.
"""

from __future__ import annotations

import dataclasses
import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .cohort import N_FEATURES, CohortTable
from .container import ContainerError, read_container, write_container

log = logging.getLogger(__name__)

CONTAINER_KIND = "brainage-model"
ARCH_VERSION = "tabtransformer-regressor/1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    n_features: int = N_FEATURES
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 64
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"n_heads={self.n_heads} must divide d_model={self.d_model}")


@dataclass(frozen=True)
class TrainConfig:
    seed: int
    epochs: int = 500
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.1
    report_every: int = 10

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


def param_shapes(arch: ArchConfig) -> "OrderedDict[str, tuple[int, ...]]":
    F, d, dff = arch.n_features, arch.d_model, arch.d_ff
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    shapes["tokenizer.weight"] = (F, d)
    shapes["tokenizer.bias"] = (F, d)
    for layer in range(arch.n_layers):
        p = f"encoder.{layer}."
        for w in ("w_q", "w_k", "w_v", "w_o"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ffn.w1"] = (d, dff)
        shapes[p + "ffn.b1"] = (dff,)
        shapes[p + "ffn.w2"] = (dff, d)
        shapes[p + "ffn.b2"] = (d,)
        for norm in ("norm1", "norm2"):
            shapes[p + norm + ".gain"] = (d,)
            shapes[p + norm + ".shift"] = (d,)
    shapes["head.weight"] = (F * d, 1)
    shapes["head.bias"] = (1,)
    return shapes


@dataclass(eq=False)
class TransformerParams:
    """Weights plus the input/output standardization the forward pass uses."""

    arch: ArchConfig
    weights: "OrderedDict[str, np.ndarray]"
    feature_mean: np.ndarray
    feature_sd: np.ndarray
    age_mean: float = 0.0
    age_sd: float = 1.0

    def n_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))

    def copy(self) -> "TransformerParams":
        return dataclasses.replace(
            self,
            weights=OrderedDict((k, v.copy()) for k, v in self.weights.items()),
            feature_mean=self.feature_mean.copy(),
            feature_sd=self.feature_sd.copy(),
        )


def init_model(arch: ArchConfig | None = None, seed: int = 0) -> TransformerParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    arch = arch or ArchConfig()
    rng = np.random.default_rng(seed)
    weights = OrderedDict()
    for name, shape in param_shapes(arch).items():
        if name == "tokenizer.weight":
            weights[name] = nn.glorot_uniform(rng, 1, arch.d_model, shape)
        elif name.endswith(".gain"):
            weights[name] = np.ones(shape)
        elif len(shape) == 2:
            weights[name] = nn.glorot_uniform(rng, shape[0], shape[1])
        else:
            weights[name] = np.zeros(shape)
    return TransformerParams(arch, weights, np.zeros(arch.n_features), np.ones(arch.n_features))


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _as_batch(features, n_features: int) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != n_features:
        raise ValueError(f"wrong feature count: expected {n_features}, got {X.shape[-1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature value")
    return X


def forward_graph(
    model: TransformerParams,
    features,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout: float = 0.0,
    trace: dict | None = None,
) -> tuple[nn.Tensor, dict[str, nn.Tensor]]:
    """Build the computation graph; returns predicted ages (B,) and the parameter leaves."""
    arch = model.arch
    X = _as_batch(features, arch.n_features)
    B = X.shape[0]
    P = {k: nn.Tensor(v, requires_grad=True, name=k) for k, v in model.weights.items()}

    def drop(t):
        return nn.dropout(t, dropout, train, rng)

    xs = (X - model.feature_mean) / model.feature_sd
    tokens = nn.add(nn.mul(xs[:, :, None], P["tokenizer.weight"]), P["tokenizer.bias"])
    h = drop(nn.relu(tokens))
    if trace is not None:
        trace["tokens"] = h.shape
        trace["encoder_outputs"] = []
        trace["attention"] = []
    for layer in range(arch.n_layers):
        p = f"encoder.{layer}."
        attn = nn.AttentionParams(
            P[p + "attn.w_q"], P[p + "attn.w_k"], P[p + "attn.w_v"], P[p + "attn.w_o"], arch.n_heads
        )
        a = nn.multi_head_attention(attn, h, None if trace is None else trace["attention"])
        h = nn.layer_norm(nn.add(h, drop(a)), P[p + "norm1.gain"], P[p + "norm1.shift"], arch.ln_eps)
        f = drop(nn.relu(nn.linear_forward(P[p + "ffn.w1"], P[p + "ffn.b1"], h)))
        f = nn.linear_forward(P[p + "ffn.w2"], P[p + "ffn.b2"], f)
        h = nn.layer_norm(nn.add(h, drop(f)), P[p + "norm2.gain"], P[p + "norm2.shift"], arch.ln_eps)
        if trace is not None:
            trace["encoder_outputs"].append(h.shape)
    flat = nn.reshape(h, (B, 1, arch.n_features * arch.d_model))
    out = nn.add(nn.matmul(flat, P["head.weight"]), P["head.bias"])
    out = nn.reshape(out, (B,))
    if trace is not None:
        trace["concat"] = flat.shape[-1:]
        trace["head"] = out.shape
    ages = nn.add(nn.scale(out, model.age_sd), model.age_mean)
    return ages, P


def forward(model: TransformerParams, features, train: bool = False, rng=None, dropout: float = 0.0,
            trace: dict | None = None) -> np.ndarray:
    """Predicted ages for a (B, 175) batch or a single 175-vector."""
    ages, _ = forward_graph(model, features, train, rng, dropout, trace)
    return ages.value


def predict(model: TransformerParams, table_or_features, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions, one per record, in order."""
    X = table_or_features.features if isinstance(table_or_features, CohortTable) else table_or_features
    X = _as_batch(X, model.arch.n_features) if len(X) else np.empty((0, model.arch.n_features))
    out = [forward(model, X[i : i + batch_size]) for i in range(0, len(X), batch_size)]
    return np.concatenate(out) if out else np.empty(0)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: float


def fit_scaling(model: TransformerParams, table: CohortTable) -> TransformerParams:
    X = table.features
    sd = X.std(axis=0)
    if np.any(sd == 0):
        raise TrainingError(f"zero-variance training feature(s): {np.flatnonzero(sd == 0)[:5].tolist()}")
    age_sd = float(table.ages.std())
    if age_sd == 0:
        raise TrainingError("training ages have zero variance")
    return dataclasses.replace(
        model, feature_mean=X.mean(axis=0), feature_sd=sd, age_mean=float(table.ages.mean()), age_sd=age_sd
    )


def train(
    model: TransformerParams, train_table: CohortTable, val_table: CohortTable, config: TrainConfig
) -> tuple[TransformerParams, list[EpochRecord]]:
    """Mini-batch Adam on mean squared error in years.

    The input model is not modified.  Feature/age standardization is refit on
    ``train_table``.  Shuffling and dropout draw from streams seeded by
    ``config.seed`` so a run is reproducible bit for bit.
    """
    if len(train_table) == 0 or len(val_table) == 0:
        raise TrainingError("training and validation tables must be nonempty")
    model = fit_scaling(model.copy(), train_table)
    X, y = train_table.features, train_table.ages
    Xv, yv = val_table.features, val_table.ages
    shuffle_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
    shuffle_rng, drop_rng = np.random.default_rng(shuffle_seq), np.random.default_rng(drop_seq)
    state = nn.AdamState(lr=config.lr)
    n = len(y)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sse = 0.0
        for b, start in enumerate(range(0, n, config.batch_size), start=1):
            idx = order[start : start + config.batch_size]
            pred, leaves = forward_graph(model, X[idx], True, drop_rng, config.dropout)
            loss = nn.mse_loss(pred, y[idx])
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            grads = nn.backward(loss)
            nn.adam_step(model.weights, grads, state)
            sse += float(loss.value) * len(idx)
        val_mae = float(np.mean(np.abs(predict(model, Xv) - yv)))
        history.append(EpochRecord(epoch, sse / n, val_mae))
        if config.report_every and (epoch % config.report_every == 0 or epoch == 1):
            log.info("epoch %d: train MSE %.4f, val MAE %.4f", epoch, sse / n, val_mae)
    return model, history


# ---------------------------------------------------------------------------
# Bias correction, gap, metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BiasCorrection:
    alpha: float
    beta: float
    fit_set: str = ""


def fit_bias_correction(predictions, ages, fit_set: str = "") -> BiasCorrection:
    """Least-squares line ``predicted = alpha * age + beta``."""
    pred = np.asarray(predictions, dtype=np.float64)
    age = np.asarray(ages, dtype=np.float64)
    if pred.shape != age.shape or pred.ndim != 1:
        raise ValueError("predictions and ages must be equal-length vectors")
    if len(age) < 3:
        raise ValueError("bias correction needs at least 3 subjects")
    ac = age - age.mean()
    sxx = float(ac @ ac)
    if sxx == 0:
        raise ValueError("degenerate bias-correction fit: ages are constant")
    alpha = float(ac @ (pred - pred.mean())) / sxx
    if alpha == 0:
        raise ValueError("degenerate bias-correction fit: slope is zero")
    beta = float(pred.mean() - alpha * age.mean())
    return BiasCorrection(alpha, beta, fit_set)


def apply_bias_correction(bc: BiasCorrection, predictions) -> np.ndarray:
    if bc.alpha == 0:
        raise ValueError("bias correction slope alpha must be nonzero")
    return (np.asarray(predictions, dtype=np.float64) - bc.beta) / bc.alpha


def brain_age_gap(corrected_predictions, ages) -> np.ndarray:
    pred = np.asarray(corrected_predictions, dtype=np.float64)
    age = np.asarray(ages, dtype=np.float64)
    if pred.shape != age.shape:
        raise ValueError(f"length mismatch: {pred.shape} predictions vs {age.shape} ages")
    return pred - age


@dataclass(frozen=True)
class Metrics:
    mae: float
    pearson_r: float
    n: int
    by_sex: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"mae": self.mae, "pearson_r": self.pearson_r, "n": self.n}
        if self.by_sex:
            out["by_sex"] = {k: v.to_dict() for k, v in self.by_sex.items()}
        return out


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    denom = np.sqrt((xc @ xc) * (yc @ yc))
    if denom == 0:
        return float("nan")
    return float(np.clip((xc @ yc) / denom, -1.0, 1.0))


def compute_metrics(predictions, ages, sexes=None) -> Metrics:
    """MAE and Pearson r, optionally per sex (``sexes`` coded male=1, female=0)."""
    pred = np.asarray(predictions, dtype=np.float64)
    age = np.asarray(ages, dtype=np.float64)
    if pred.shape != age.shape:
        raise ValueError("predictions and ages must have equal length")
    if len(age) < 2:
        raise ValueError(f"metrics need n >= 2, got {len(age)}")
    by_sex = {}
    if sexes is not None:
        sexes = np.asarray(sexes)
        for label, code in (("male", 1), ("female", 0)):
            mask = sexes == code
            if mask.sum() < 2:
                raise ValueError(f"stratum {label!r} has n={int(mask.sum())} < 2")
            by_sex[label] = compute_metrics(pred[mask], age[mask])
    return Metrics(float(np.mean(np.abs(pred - age))), pearson_r(pred, age), len(age), by_sex)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_model(model: TransformerParams, path) -> None:
    arrays = OrderedDict(model.weights)
    arrays["scaling.feature_mean"] = model.feature_mean
    arrays["scaling.feature_sd"] = model.feature_sd
    arrays["scaling.age"] = np.array([model.age_mean, model.age_sd])
    meta = {"version": ARCH_VERSION, "arch": dataclasses.asdict(model.arch)}
    write_container(path, CONTAINER_KIND, arrays, meta)


def load_model(path) -> TransformerParams:
    arrays, meta = read_container(path, CONTAINER_KIND)
    if meta.get("version") != ARCH_VERSION:
        raise ContainerError(f"model version {meta.get('version')!r} != {ARCH_VERSION!r}")
    arch = ArchConfig(**meta["arch"])
    weights = OrderedDict()
    for name, shape in param_shapes(arch).items():
        if name not in arrays:
            raise ContainerError(f"manifest error: missing block {name!r}")
        if arrays[name].shape != shape:
            got = arrays[name].shape
            if name.startswith("tokenizer."):
                raise ContainerError(
                    f"manifest error in block {name!r}: expected {shape[0]} tokenizers, found {got[0]} "
                    f"(shape {got})"
                )
            raise ContainerError(f"manifest error in block {name!r}: expected shape {shape}, found {got}")
        weights[name] = arrays[name]
    F = arch.n_features
    for name, shape in (("scaling.feature_mean", (F,)), ("scaling.feature_sd", (F,)), ("scaling.age", (2,))):
        if name not in arrays or arrays[name].shape != shape:
            raise ContainerError(f"manifest error in block {name!r}: expected shape {shape}")
    extra = set(arrays) - set(weights) - {"scaling.feature_mean", "scaling.feature_sd", "scaling.age"}
    if extra:
        raise ContainerError(f"manifest error: unexpected blocks {sorted(extra)}")
    age_mean, age_sd = arrays["scaling.age"]
    return TransformerParams(
        arch, weights, arrays["scaling.feature_mean"], arrays["scaling.feature_sd"], float(age_mean), float(age_sd)
    )
