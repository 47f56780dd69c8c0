"""Mini-batch training: Adam, shuffled epochs, early stopping on validation
MSE, and best-model checkpointing.

Rendering is loop-invariant per subject (geometry never changes during
training), so subject ViewStacks are rendered once and cached as ``.mvr``
files under the run directory; augmentation is applied to the cached stacks
fresh every epoch. ``use_cache=False`` re-renders every epoch and exercises
the full end-to-end path.

Every source of randomness (shuffling, augmentation, internal dropout) is a
pure function of the config seed plus loop indices, so identical inputs give
bit-identical logs and checkpoints on one platform.
"""

from __future__ import annotations

import json
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import (
    AugmentConfig,
    BinningScheme,
    SubjectRecord,
    assign_bin,
    augment,
    class_weights,
    load_bundle,
    load_manifest,
)
from .model import (
    EncoderConfig,
    LossConfig,
    ParameterStore,
    backward,
    forward_batch,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .render import ViewStack, camera_rig, load_mvr, render_views, save_mvr

LOG_COLUMNS = ("epoch", "train_loss", "val_mse", "val_mae", "seconds")


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters; defaults follow the training recipe."""

    batch_size: int = 18
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    max_epochs: int = 400
    early_stop_patience: int = 30
    early_stop_min_delta: float = 0.0
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    loss: LossConfig = LossConfig()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")


class AdamState:
    """First/second moment buffers plus the shared timestep counter."""

    def __init__(self, params: ParameterStore):
        self.step_count = 0
        self.m = {name: np.zeros_like(value) for name, value in params.items()}
        self.v = {name: np.zeros_like(value) for name, value in params.items()}


def adam_step(
    params: ParameterStore,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update from the gradients in ``params``.

    The timestep increments exactly once per call; parameters are updated in
    place as p -= lr * m_hat / (sqrt(v_hat) + eps).
    """
    for name in params.names:
        if state.m[name].shape != params[name].shape:
            raise ValueError(f"Adam moment shape mismatch for {name!r}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name in params.names:
        g = params.grad(name)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[name][...] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@dataclass
class EarlyStopping:
    """Validation-loss tracker: tolerates ``patience`` stale epochs in a row.

    ``observe`` returns True when the value improves on the best by more than
    ``min_delta``; ``should_stop`` turns True once the count of consecutive
    non-improving epochs exceeds ``patience``. With losses
    [5, 4, 4.1, 4.2, 4.3, 4.4] and patience 3, the run stops after the 6th
    observation and the best index is 2.
    """

    patience: int
    min_delta: float = 0.0
    best: float = np.inf
    best_index: int = 0
    stale: int = 0
    count: int = 0

    def observe(self, value: float) -> bool:
        self.count += 1
        if value < self.best - self.min_delta:
            self.best = float(value)
            self.best_index = self.count
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale > self.patience


@dataclass(frozen=True)
class Sample:
    """One training example: a rendered subject with its labels."""

    subject_id: str
    space: str
    stack: ViewStack
    ga_weeks: float
    class_index: int
    sample_index: int


def render_or_load(record: SubjectRecord, rig, cache_dir: Path | None) -> ViewStack:
    """The record's ViewStack, from the ``.mvr`` cache when possible.

    Cache files are keyed by subject, space and resolution; a cache hit is
    bit-identical to a fresh render because both rasterization and the
    ``.mvr`` round-trip are exact.
    """
    cache_path = None
    if cache_dir is not None:
        cache_path = Path(cache_dir) / f"{record.subject_id}_{record.space}_{rig[0].resolution}px.mvr"
        if cache_path.is_file():
            return load_mvr(cache_path)
    stack = render_views(load_bundle(record), rig)
    if cache_path is not None:
        cache_path.parent.mkdir(parents=True, exist_ok=True)
        save_mvr(cache_path, stack)
    return stack


def prepare_samples(records, rig, scheme: BinningScheme, cache_dir: Path | None):
    """Render (or load) every record, in manifest order, with bin labels."""
    samples = []
    for i, record in enumerate(records):
        stack = render_or_load(record, rig, cache_dir)
        samples.append(
            Sample(
                subject_id=record.subject_id,
                space=record.space,
                stack=stack,
                ga_weeks=record.ga_weeks,
                class_index=assign_bin(record.ga_weeks, scheme),
                sample_index=i,
            )
        )
    return samples


def _batch_arrays(samples, config: TrainConfig, epoch: int, train_mode: bool):
    """Stack (optionally augmented) samples into batch arrays."""
    if train_mode and not config.augment.is_identity:
        stacks = [augment(s.stack, config.augment, s.sample_index, epoch).data for s in samples]
    else:
        stacks = [s.stack.data for s in samples]
    images = np.stack(stacks).astype(np.float64)
    ga = np.array([s.ga_weeks for s in samples])
    cls = np.array([s.class_index for s in samples], dtype=np.int64)
    return images, ga, cls


def train_epoch(
    samples,
    params: ParameterStore,
    state: AdamState,
    config: TrainConfig,
    encoder: EncoderConfig,
    epoch: int,
    loss_cfg: LossConfig | None = None,
) -> float:
    """One pass over the training samples; returns the mean sample loss.

    Sample order is a pure function of (config.seed, epoch). Batches of
    ``batch_size`` are taken in that order; the final partial batch is kept.
    Each batch runs forward, backward and one Adam step.
    """
    if not samples:
        raise ValueError("training split is empty")
    loss_cfg = config.loss if loss_cfg is None else loss_cfg
    order = np.random.default_rng([int(config.seed), int(epoch)]).permutation(len(samples))
    total = 0.0
    for start in range(0, len(order), config.batch_size):
        chosen = [samples[i] for i in order[start : start + config.batch_size]]
        images, ga, cls = _batch_arrays(chosen, config, epoch, train_mode=True)
        rng = None
        if encoder.internal_dropout_p > 0:
            rng = np.random.default_rng([int(config.seed), int(epoch), int(start), 1])
        loss_value, _ = backward(images, ga, cls, encoder, params, loss_cfg, mode="train", rng=rng)
        adam_step(params, state, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon)
        total += loss_value * len(chosen)
    return total / len(samples)


def _eval_errors(samples, params: ParameterStore, encoder: EncoderConfig, batch_size: int) -> np.ndarray:
    """Eval-mode GA errors (pred - label) over samples, in order."""
    errors = []
    for start in range(0, len(samples), batch_size):
        chosen = samples[start : start + batch_size]
        images = np.stack([s.stack.data for s in chosen]).astype(np.float64)
        result = forward_batch(images, encoder, params, mode="eval")
        errors.extend(result.ga_pred - np.array([s.ga_weeks for s in chosen]))
    return np.array(errors)


def validate(samples, params: ParameterStore, encoder: EncoderConfig, batch_size: int = 18) -> float:
    """Validation MSE in weeks^2: eval mode, no augmentation, no mutation."""
    if not samples:
        raise ValueError("validation split is empty")
    return float((_eval_errors(samples, params, encoder, batch_size) ** 2).mean())


@dataclass(frozen=True)
class FitResult:
    """Where a training run ended up and what it wrote."""

    run_dir: Path
    best_checkpoint: Path
    log_path: Path
    best_epoch: int
    best_val_mse: float
    epochs_run: int
    log_rows: tuple


def _format_log_row(row) -> str:
    epoch, train_loss, val_mse, val_mae, seconds = row
    return f"{epoch},{train_loss:.17g},{val_mse:.17g},{val_mae:.17g},{seconds:.6f}"


def _checkpoint_metadata(config, encoder, scheme, resolution, radius_multiplier, fov_y_deg, epoch, val_mse):
    return {
        "epoch": int(epoch),
        "val_mse": float(val_mse),
        "seed": int(config.seed),
        "in_channels": int(encoder.in_channels),
        "stage_channels": list(encoder.stage_channels),
        "internal_dropout_p": float(encoder.internal_dropout_p),
        "class_count": int(scheme.class_count),
        "bin_edges": list(scheme.edges),
        "resolution": int(resolution),
        "radius_multiplier": float(radius_multiplier),
        "fov_y_deg": float(fov_y_deg),
        "train_config": {
            "batch_size": int(config.batch_size),
            "learning_rate": float(config.learning_rate),
            "adam_beta1": float(config.adam_beta1),
            "adam_beta2": float(config.adam_beta2),
            "adam_epsilon": float(config.adam_epsilon),
            "max_epochs": int(config.max_epochs),
            "early_stop_patience": int(config.early_stop_patience),
            "early_stop_min_delta": float(config.early_stop_min_delta),
            "ce_lambda": float(config.loss.ce_lambda),
            "input_dropout_p": float(config.augment.input_dropout_p),
            "noise_sigma": float(config.augment.noise_sigma),
        },
    }


def encoder_from_metadata(metadata: dict) -> EncoderConfig:
    return EncoderConfig(
        in_channels=int(metadata["in_channels"]),
        stage_channels=tuple(metadata["stage_channels"]),
        internal_dropout_p=float(metadata.get("internal_dropout_p", 0.0)),
    )


def rig_from_metadata(metadata: dict):
    return camera_rig(
        radius_multiplier=float(metadata["radius_multiplier"]),
        fov_y_deg=float(metadata["fov_y_deg"]),
        resolution=int(metadata["resolution"]),
    )


def fit(
    manifest: str | Path,
    run_dir: str | Path,
    config: TrainConfig = TrainConfig(),
    encoder: EncoderConfig | None = None,
    resolution: int = 224,
    radius_multiplier: float = 2.5,
    fov_y_deg: float = 60.0,
    use_cache: bool = True,
    scheme: BinningScheme = BinningScheme(),
    stage_channels: tuple[int, ...] | None = None,
    internal_dropout_p: float = 0.0,
) -> FitResult:
    """Full training run: epochs of train_epoch + validate with early stopping.

    A checkpoint ``ckpt_epoch{N}.bin`` is written whenever validation MSE
    improves by more than ``early_stop_min_delta``; ``ckpt_best.bin`` always
    mirrors the latest improvement. Per-epoch rows go to ``train_log.csv``
    (columns ``epoch,train_loss,val_mse,val_mae,seconds``), flushed after
    every epoch so interrupted runs keep their history.

    When ``config.loss.class_weights`` is None, inverse-frequency weights are
    computed from the training split's bin counts.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    records = load_manifest(manifest, scheme)
    train_records = [r for r in records if r.split == "train"]
    val_records = [r for r in records if r.split == "validation"]
    if not train_records:
        raise ValueError("manifest has no train split")
    if not val_records:
        raise ValueError("manifest has no validation split")

    rig = camera_rig(radius_multiplier, fov_y_deg, resolution)
    cache_dir = run_dir / "cache" if use_cache else None
    train_samples = prepare_samples(train_records, rig, scheme, cache_dir)
    val_samples = prepare_samples(val_records, rig, scheme, cache_dir)

    channels = {s.stack.channel_count for s in train_samples + val_samples}
    if len(channels) != 1:
        raise ValueError(f"subjects disagree on channel count: {sorted(channels)}")
    in_channels = channels.pop()
    if encoder is None:
        encoder = EncoderConfig(
            in_channels=in_channels,
            stage_channels=tuple(stage_channels) if stage_channels else EncoderConfig().stage_channels,
            internal_dropout_p=internal_dropout_p,
        )
    elif encoder.in_channels != in_channels:
        raise ValueError(f"encoder expects {encoder.in_channels} channels but data has {in_channels}")

    loss_cfg = config.loss
    if loss_cfg.class_weights is None:
        counts = np.bincount([s.class_index for s in train_samples], minlength=scheme.class_count)
        loss_cfg = replace(loss_cfg, class_weights=class_weights(counts))

    params = init_params(encoder, config.seed, class_count=scheme.class_count)
    state = AdamState(params)
    stopper = EarlyStopping(patience=config.early_stop_patience, min_delta=config.early_stop_min_delta)

    log_path = run_dir / "train_log.csv"
    log_path.write_text(",".join(LOG_COLUMNS) + "\n", encoding="utf-8")
    best_path = run_dir / "ckpt_best.bin"

    (run_dir / "run_config.json").write_text(
        json.dumps(
            _checkpoint_metadata(config, encoder, scheme, resolution, radius_multiplier, fov_y_deg, 0, float("nan")),
            sort_keys=True,
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )

    rows = []
    epochs_run = 0
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        train_loss = train_epoch(train_samples, params, state, config, encoder, epoch, loss_cfg)
        errors = _eval_errors(val_samples, params, encoder, config.batch_size)
        val_mse = float((errors**2).mean())
        val_mae = float(np.abs(errors).mean())
        seconds = time.perf_counter() - started
        row = (epoch, train_loss, val_mse, val_mae, seconds)
        rows.append(row)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(_format_log_row(row) + "\n")
        epochs_run = epoch
        if stopper.observe(val_mse):
            meta = _checkpoint_metadata(
                config, encoder, scheme, resolution, radius_multiplier, fov_y_deg, epoch, val_mse
            )
            epoch_path = run_dir / f"ckpt_epoch{epoch}.bin"
            save_checkpoint(epoch_path, params, meta)
            shutil.copyfile(epoch_path, best_path)
        if stopper.should_stop:
            break

    if stopper.best_index == 0:
        raise RuntimeError("no epoch produced a finite validation loss")
    return FitResult(
        run_dir=run_dir,
        best_checkpoint=best_path,
        log_path=log_path,
        best_epoch=stopper.best_index,
        best_val_mse=stopper.best,
        epochs_run=epochs_run,
        log_rows=tuple(rows),
    )


def predict_ga(records, params: ParameterStore, metadata: dict) -> np.ndarray:
    """Eval-mode GA predictions for records, in order, using checkpoint metadata.

    Rejects subjects whose feature channel count does not match the encoder
    the checkpoint was trained with.
    """
    encoder = encoder_from_metadata(metadata)
    rig = rig_from_metadata(metadata)
    preds = []
    for record in records:
        mesh = load_bundle(record)
        if mesh.channel_count != encoder.in_channels:
            raise ValueError(
                f"{record.subject_id}: features have {mesh.channel_count} channels but the "
                f"checkpoint was trained with {encoder.in_channels}"
            )
        stack = render_views(mesh, rig)
        images = stack.data[None].astype(np.float64)
        result = forward_batch(images, encoder, params, mode="eval")
        preds.append(float(result.ga_pred[0]))
    return np.array(preds)


def load_checkpoint_for_predict(path: str | Path):
    """Checkpoint loader that also sanity-checks the metadata contract."""
    params, metadata = load_checkpoint(path)
    for key in ("in_channels", "stage_channels", "resolution", "radius_multiplier", "fov_y_deg"):
        if key not in metadata:
            raise ValueError(f"{path}: checkpoint metadata missing {key!r}")
    return params, metadata
