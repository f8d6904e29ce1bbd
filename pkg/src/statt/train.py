"""Training loop, evaluation metrics, attention profiling, noise sweep.

Training is plain mini-batch Adam over extracted patches with a seeded
per-epoch shuffle; the parameters with the best validation mean-F1 win.
Evaluation accumulates an integer confusion matrix (rows = truth) over
non-ignored pixels and derives per-class F1.  Everything is deterministic
for a fixed seed/environment; wall-clock timings are reported to callers
but kept out of the deterministic JSON payloads.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import IGNORE_LABEL, SceneDataset, build_dataset, extract_patches
from .errors import ConfigError, ContractError, NumericalError
from .model import (
    ModelConfig,
    ModelParams,
    cross_entropy_loss,
    forward_batch,
    init_params,
    with_mode,
)

_EVAL_BATCH = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 0          # epochs without val improvement; 0 disables
    seed: int = 0
    mode: str | None = None    # overrides the model config's mode when set

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError(f"adam eps must be > 0, got {self.eps}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.mode not in (None, "attention", "mean"):
            raise ConfigError(f"mode must be attention or mean, got {self.mode!r}")


def default_train_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=12, batch_size=32, learning_rate=1e-3,
                       patience=0, seed=seed)


def train_config_to_dict(config: TrainConfig) -> dict:
    return dataclasses.asdict(config)


def train_config_from_dict(d) -> TrainConfig:
    if not isinstance(d, dict):
        raise ConfigError(f"train config must be an object, got {type(d).__name__}")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(d) - fields
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    try:
        return TrainConfig(**d)
    except TypeError as e:
        raise ConfigError(f"invalid train config: {e}") from None


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moment estimates plus the step counter."""

    def __init__(self, params: ModelParams):
        self.step = 0
        self.m = {name: np.zeros_like(params[name].data) for name in params}
        self.v = {name: np.zeros_like(params[name].data) for name in params}


def adam_step(params: ModelParams, grads, state: AdamState,
              config: TrainConfig) -> None:
    """One in-place Adam update with bias correction.

    All scalar factors are computed in the parameter dtype so that 32-bit
    training is bit-reproducible.  Non-finite gradients abort.
    """
    state.step += 1
    t = state.step
    for name in params:
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"adam_step: non-finite gradient for {name!r}")
        p = params[name]
        dt = p.data.dtype.type
        b1, b2 = dt(config.beta1), dt(config.beta2)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (dt(1) - b1) * g
        v *= b2
        v += (dt(1) - b2) * (g * g)
        m_hat = m / (dt(1) - b1 ** dt(t))
        v_hat = v / (dt(1) - b2 ** dt(t))
        p.data -= dt(config.learning_rate) * m_hat / (np.sqrt(v_hat) + dt(config.eps))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    """Confusion-matrix metrics for one split.

    ``excluded_classes`` lists classes with no truth or predicted pixels
    (TP+FP+FN = 0); they do not enter ``mean_f1``.  ``timing`` is carried
    for reporting but omitted from :meth:`to_json_dict` by default so the
    metrics payload is bit-reproducible across runs.
    """

    confusion: np.ndarray            # [L,L] int64, rows = truth
    class_names: list[str]
    per_class_f1: list[float | None]
    per_class_count: list[int]
    mean_f1: float
    excluded_classes: list[str]
    timing: dict = field(default_factory=dict)

    def to_json_dict(self, include_timing: bool = False) -> dict:
        classes = [
            {"name": name, "count": int(count), "f1": f1}
            for name, count, f1 in zip(self.class_names, self.per_class_count,
                                       self.per_class_f1)
        ]
        return {
            "confusion": [[int(v) for v in row] for row in self.confusion],
            "classes": classes,
            "mean_f1": self.mean_f1,
            "excluded_classes": list(self.excluded_classes),
            "timing": dict(self.timing) if include_timing else None,
        }


def metrics_to_json(metrics: Metrics, include_timing: bool = False) -> str:
    return json.dumps(metrics.to_json_dict(include_timing=include_timing),
                      indent=2, sort_keys=True) + "\n"


def metrics_from_confusion(confusion: np.ndarray, class_names: list[str],
                           timing: dict | None = None) -> Metrics:
    """Derive F1 scores from a truth-by-prediction count matrix."""
    confusion = np.asarray(confusion, dtype=np.int64)
    l = len(class_names)
    if confusion.shape != (l, l):
        raise ConfigError(
            f"confusion shape {confusion.shape} != ({l}, {l}) for class names"
        )
    if np.any(confusion < 0):
        raise ContractError("confusion counts must be non-negative")
    tp = np.diag(confusion)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    per_f1: list[float | None] = []
    excluded = []
    included = []
    for k in range(l):
        if denom[k] == 0:
            per_f1.append(None)
            excluded.append(class_names[k])
        else:
            f1 = 2.0 * tp[k] / denom[k]
            per_f1.append(float(f1))
            included.append(float(f1))
    mean_f1 = float(np.mean(included)) if included else 0.0
    return Metrics(
        confusion=confusion,
        class_names=list(class_names),
        per_class_f1=per_f1,
        per_class_count=[int(c) for c in confusion.sum(axis=1)],
        mean_f1=mean_f1,
        excluded_classes=excluded,
        timing=dict(timing or {}),
    )


def _batched(n: int, size: int):
    for start in range(0, n, size):
        yield start, min(start + size, n)


def _stack_patches(patches) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([p.x for p in patches])
    y = np.stack([p.y for p in patches])
    return x, y


def _predict(params: ModelParams, config: ModelConfig, x: np.ndarray) -> np.ndarray:
    """Per-pixel argmax class ids for a [N,T,C,in,in] stack (ties -> lowest id)."""
    preds = []
    with ag.no_grad():
        for a, b in _batched(x.shape[0], _EVAL_BATCH):
            parts = forward_batch(Tensor(x[a:b]), params, config, want_probs=True)
            preds.append(np.argmax(parts.probs.data, axis=1).astype(np.uint8))
    return np.concatenate(preds)


def confusion_counts(truth: np.ndarray, pred: np.ndarray, num_classes: int,
                     ignore_label: int = IGNORE_LABEL) -> np.ndarray:
    """Truth-by-prediction counts over non-ignored pixels."""
    truth = np.asarray(truth)
    pred = np.asarray(pred)
    if truth.shape != pred.shape:
        raise ConfigError(f"truth shape {truth.shape} != pred shape {pred.shape}")
    mask = truth != ignore_label
    t = truth[mask].astype(np.int64)
    p = pred[mask].astype(np.int64)
    if t.size and (t.max() >= num_classes or p.max() >= num_classes):
        raise ContractError(f"labels outside [0, {num_classes}) in confusion input")
    flat = np.bincount(t * num_classes + p, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def evaluate(params: ModelParams, dataset: SceneDataset, split: str,
             config: ModelConfig) -> Metrics:
    """Forward the whole split and score it against the cleaned labels."""
    patches = extract_patches(dataset, split, config.in_size, config.out_size)
    if not patches:
        raise ConfigError(f"split {split!r} has no usable patches")
    t0 = time.perf_counter()
    x, y = _stack_patches(patches)
    pred = _predict(params, config, x)
    confusion = confusion_counts(y, pred, dataset.num_classes)
    seconds = time.perf_counter() - t0
    return metrics_from_confusion(confusion, dataset.class_names,
                                  timing={"test_seconds": seconds})


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: ModelParams          # loaded with the best-epoch values
    config: ModelConfig          # effective config (mode override applied)
    history: list[dict]          # {"epoch", "train_loss", "val_mean_f1"}
    best_epoch: int
    best_val_f1: float
    epochs_run: int
    epoch_seconds: list[float]


def train(params: ModelParams, dataset: SceneDataset, model_config: ModelConfig,
          train_config: TrainConfig) -> TrainResult:
    """Mini-batch Adam with per-epoch shuffles and best-val selection.

    Mutates ``params`` in place and leaves them at the best-validation
    values.  Early stopping triggers after ``patience`` epochs without a
    new best (0 disables it); ties keep the earlier epoch.
    """
    config = with_mode(model_config, train_config.mode)
    train_patches = extract_patches(dataset, "train", config.in_size,
                                    config.out_size)
    val_patches = extract_patches(dataset, "val", config.in_size, config.out_size)
    if not train_patches:
        raise ConfigError("train split has no usable patches")
    if not val_patches:
        raise ConfigError("val split has no usable patches")
    x_train, y_train = _stack_patches(train_patches)
    x_val, y_val = _stack_patches(val_patches)
    n = x_train.shape[0]

    state = AdamState(params)
    history: list[dict] = []
    epoch_seconds: list[float] = []
    best_val = -1.0
    best_epoch = -1
    best_values: dict[str, np.ndarray] | None = None
    stale = 0

    for epoch in range(train_config.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        loss_sum = 0.0
        for bi, (a, b) in enumerate(_batched(n, train_config.batch_size)):
            idx = order[a:b]
            ag.zero_grads(params)
            parts = forward_batch(Tensor(x_train[idx]), params, config)
            loss = cross_entropy_loss(parts.probs, y_train[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch {bi}"
                )
            ag.backward(loss)
            grads = {name: ag.grad_or_zeros(params[name]) for name in params}
            adam_step(params, grads, state, train_config)
            loss_sum += value * len(idx)

        pred = _predict(params, config, x_val)
        val_f1 = metrics_from_confusion(
            confusion_counts(y_val, pred, dataset.num_classes),
            dataset.class_names).mean_f1
        epoch_seconds.append(time.perf_counter() - t0)
        history.append({
            "epoch": epoch,
            "train_loss": loss_sum / n,
            "val_mean_f1": val_f1,
        })
        if val_f1 > best_val:
            best_val = val_f1
            best_epoch = epoch
            best_values = params.copy_values()
            stale = 0
        else:
            stale += 1
            if train_config.patience and stale >= train_config.patience:
                break

    assert best_values is not None
    params.set_values(best_values)
    return TrainResult(params, config, history, best_epoch, best_val,
                       len(history), epoch_seconds)


def history_to_csv(history: list[dict]) -> str:
    lines = ["epoch,train_loss,val_mean_f1"]
    for row in history:
        lines.append(f"{row['epoch']},{row['train_loss']!r},{row['val_mean_f1']!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# attention profiling
# ---------------------------------------------------------------------------

@dataclass
class AttentionProfile:
    """Mean attention weight per time step over a split's patches."""

    alpha_mean: np.ndarray               # [T]
    per_class: dict[str, np.ndarray]     # class name -> [T] conditional mean
    patch_count: int
    class_patch_count: dict[str, int]


def attention_profile(params: ModelParams, dataset: SceneDataset, split: str,
                      config: ModelConfig) -> AttentionProfile:
    """Average per-patch attention weights, overall and per majority class.

    Refuses mean-mode configs: the profile would be the constant 1/T and
    says nothing about the data.
    """
    if config.mode != "attention":
        raise ContractError(
            "attention_profile requires an attention-mode model; "
            "mean mode uses constant uniform weights"
        )
    patches = extract_patches(dataset, split, config.in_size, config.out_size)
    if not patches:
        raise ConfigError(f"split {split!r} has no usable patches")
    x, _ = _stack_patches(patches)
    alphas = []
    with ag.no_grad():
        for a, b in _batched(x.shape[0], _EVAL_BATCH):
            parts = forward_batch(Tensor(x[a:b]), params, config, upto="alpha")
            alphas.append(parts.alpha.data)
    alpha = np.concatenate(alphas, axis=1)       # [T, N]

    majorities = np.array([-1 if (m := p.majority_class()) is None else m
                           for p in patches])
    per_class: dict[str, np.ndarray] = {}
    class_counts: dict[str, int] = {}
    for k, name in enumerate(dataset.class_names):
        sel = majorities == k
        count = int(sel.sum())
        if count:
            per_class[name] = alpha[:, sel].mean(axis=1)
            class_counts[name] = count
    return AttentionProfile(alpha.mean(axis=1), per_class, alpha.shape[1],
                            class_counts)


def attention_to_csv(profile: AttentionProfile) -> str:
    names = list(profile.per_class)
    header = ["t", "alpha_mean"] + [f"alpha_class_{n}" for n in names]
    lines = [",".join(header)]
    for t in range(profile.alpha_mean.shape[0]):
        row = [str(t), repr(float(profile.alpha_mean[t]))]
        row += [repr(float(profile.per_class[n][t])) for n in names]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# noise sweep
# ---------------------------------------------------------------------------

@dataclass
class SweepResult:
    rows: list[dict]                     # fraction, mode, mean_f1, per-class f1
    class_names: list[str]
    checkpoints: dict                    # (fraction, mode) -> param values
    noisy_steps: dict                    # fraction -> list of steps
    run_seconds: dict                    # (fraction, mode) -> build+train+eval wall


def noise_sweep(model_config: ModelConfig, train_config: TrainConfig,
                scene_config, fractions, keep_params: bool = False) -> SweepResult:
    """Train attention and mean modes per noise fraction; score on test.

    Every run starts from the same seeded initialization so the modes and
    fractions differ only in aggregation and data.  Scenes are rebuilt
    per fraction with frame noise injected before normalization.
    """
    fractions = list(fractions)
    if not fractions:
        raise ConfigError("noise_sweep needs at least one fraction")
    for f in fractions:
        if not 0.0 <= f <= 0.5:
            raise ConfigError(f"noise fraction must be in [0, 0.5], got {f}")

    rows: list[dict] = []
    checkpoints: dict = {}
    noisy_steps: dict = {}
    run_seconds: dict = {}
    class_names: list[str] = []
    for fraction in fractions:
        t_build = time.perf_counter()
        dataset = build_dataset(scene_config, noise_fraction=fraction)
        build_seconds = time.perf_counter() - t_build
        class_names = dataset.class_names
        noisy_steps[fraction] = list(dataset.manifest["noisy_steps"])
        for mode in ("attention", "mean"):
            t_run = time.perf_counter()
            config = with_mode(model_config, mode)
            params = init_params(config, train_config.seed)
            result = train(params, dataset, config, train_config)
            metrics = evaluate(result.params, dataset, "test", result.config)
            run_seconds[(fraction, mode)] = (
                build_seconds + time.perf_counter() - t_run
            )
            row = {"fraction": fraction, "mode": mode, "mean_f1": metrics.mean_f1}
            for name, f1 in zip(metrics.class_names, metrics.per_class_f1):
                row[f"{name}_f1"] = f1
            rows.append(row)
            if keep_params:
                checkpoints[(fraction, mode)] = result.params.copy_values()
    return SweepResult(rows, class_names, checkpoints, noisy_steps, run_seconds)


def sweep_to_csv(result: SweepResult) -> str:
    header = ["fraction", "mode", "mean_f1"] + [f"{n}_f1" for n in result.class_names]
    lines = [",".join(header)]
    for row in result.rows:
        cells = [repr(float(row["fraction"])), row["mode"], repr(float(row["mean_f1"]))]
        for name in result.class_names:
            value = row.get(f"{name}_f1")
            cells.append("" if value is None else repr(float(value)))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
