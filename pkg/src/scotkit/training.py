"""Batch construction, decoupled-weight-decay Adam, and the training loop.

Everything is a pure function of (dataset, config, init): shuffles key off
seed XOR epoch, dropout masks key off (seed, epoch, batch, item), and the
optimizer is deterministic, so identical runs produce identical parameters
bit for bit.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .combiner import CombinerParams, backward_batch, forward_batch, save_checkpoint
from .errors import (
    BadRangeError,
    ConfigError,
    EmptyBatchError,
    EmptyDatasetError,
    InvariantViolationError,
    IoError,
    NonFiniteLossError,
)
from .loss import LossConfig, total_loss
from .store import EmbeddingTable, TrainingExample
from .tensor import Pcg32, derive_stream

log = logging.getLogger(__name__)

MIN_BATCH = 2


@dataclass(frozen=True)
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    def __post_init__(self) -> None:
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise BadRangeError("betas must be in [0, 1)")
        if self.eps <= 0:
            raise BadRangeError("eps must be positive")
        if self.weight_decay < 0:
            raise BadRangeError("weight decay must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 1024
    learning_rate: float = 1e-4
    seed: int = 0
    target_source: str = "text"  # "text" trains on edited captions, "image" on target images
    loss: LossConfig = field(default_factory=LossConfig)
    adamw: AdamWConfig = field(default_factory=AdamWConfig)

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise BadRangeError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < MIN_BATCH:
            raise BadRangeError(
                f"batch size must be >= {MIN_BATCH}, got {self.batch_size}"
            )
        if self.learning_rate <= 0:
            raise BadRangeError(f"learning rate must be positive, got {self.learning_rate}")
        if self.target_source not in ("text", "image"):
            raise ConfigError(f"target_source must be 'text' or 'image', got {self.target_source!r}")


@dataclass
class AdamWState:
    """First/second moment estimates per tensor plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, params: CombinerParams, step: int = 0) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors().items()},
            v={k: np.zeros_like(t) for k, t in params.tensors().items()},
            step=step,
        )


def adamw_step(
    params: CombinerParams,
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: AdamWConfig,
    learning_rate: float,
) -> tuple[CombinerParams, AdamWState]:
    """One decoupled-weight-decay Adam update; functional, returns new objects."""
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    new_tensors: dict[str, np.ndarray] = {}
    for name, theta in params.tensors().items():
        g = grads[name]
        if g.shape != theta.shape:
            raise InvariantViolationError(f"grad shape {g.shape} != param shape {theta.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        update = learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps)
        new_tensors[name] = (
            theta - update - learning_rate * cfg.weight_decay * theta
        ).astype(theta.dtype)
        new_m[name] = m.astype(theta.dtype)
        new_v[name] = v.astype(theta.dtype)
    return replace(params, **new_tensors), AdamWState(m=new_m, v=new_v, step=t)


def make_batches(
    dataset: list[TrainingExample],
    batch_size: int,
    seed: int,
    epoch: int,
    min_batch: int = MIN_BATCH,
) -> list[list[TrainingExample]]:
    """Deterministic epoch shuffle, then fixed-size slices.

    The shuffle is keyed by seed XOR epoch.  A final partial batch is kept
    when it has at least `min_batch` examples and dropped (with a log line)
    otherwise.
    """
    if not dataset:
        raise EmptyDatasetError("no training examples")
    if batch_size < min_batch:
        raise BadRangeError(f"batch size {batch_size} below minimum {min_batch}")
    rng = Pcg32(seed ^ epoch, seq=derive_stream(0x5F1E, epoch))
    order = list(range(len(dataset)))
    for i in range(len(order) - 1, 0, -1):  # Fisher-Yates
        j = int(rng.uniform(0.0, float(i + 1)))
        order[i], order[j] = order[j], order[i]
    batches = []
    for start in range(0, len(order), batch_size):
        chunk = order[start : start + batch_size]
        if len(chunk) < min_batch:
            log.info("epoch %d: dropping %d-example remainder batch", epoch, len(chunk))
            continue
        batches.append([dataset[k] for k in chunk])
    if not batches:
        raise EmptyBatchError(
            f"dataset of {len(dataset)} examples yields no batch of size >= {min_batch}"
        )
    return batches


def dropout_streams(seed: int, epoch: int, batch_index: int, n_items: int) -> list[Pcg32]:
    """One generator per batch item; identical regardless of execution layout."""
    return [
        Pcg32(seed, seq=derive_stream(0xD0, epoch, batch_index, item))
        for item in range(n_items)
    ]


@dataclass(frozen=True)
class BatchRecord:
    epoch: int
    batch: int
    l_pos: float
    l_neg_prime: float
    l_caption_neg: float
    l_total: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "batch": self.batch,
                "L_pos": self.l_pos,
                "L_neg_prime": self.l_neg_prime,
                "L_caption_neg": self.l_caption_neg,
                "L_total": self.l_total,
                "wall_ms": self.wall_ms,
            }
        )


@dataclass
class TrainResult:
    params: CombinerParams
    records: list[BatchRecord]
    checkpoint_paths: list[str]


def _batch_matrices(batch, cfg, image_targets):
    v = np.stack([ex.image for ex in batch])
    t_m = np.stack([ex.modification for ex in batch])
    t = np.stack([ex.original_text for ex in batch])
    if cfg.target_source == "text":
        targets = np.stack([ex.target_text for ex in batch])
    else:
        targets = np.stack([image_targets.row(ex.id) for ex in batch])
    return v, t_m, targets, t


def train(
    dataset: list[TrainingExample],
    config: TrainConfig,
    params: CombinerParams,
    image_targets: EmbeddingTable | None = None,
    checkpoint_dir=None,
    metrics_path=None,
    start_epoch: int = 0,
) -> TrainResult:
    """Run the full loop; returns final parameters and per-batch metrics.

    `target_source="image"` swaps the attraction/repulsion targets for rows of
    `image_targets` keyed by example id.  Checkpoints land in
    `checkpoint_dir/epoch_{k}.ckpt` after each epoch; metrics stream to
    `metrics_path` as newline-delimited records.  `start_epoch` offsets epoch
    numbering (and the optimizer step counter) when resuming.
    """
    if not dataset:
        raise EmptyDatasetError("no training examples")
    if config.target_source == "image":
        if image_targets is None:
            raise ConfigError("target_source='image' requires an image-target table")
        missing = [ex.id for ex in dataset if ex.id not in image_targets]
        if missing:
            raise InvariantViolationError(
                f"{len(missing)} ids lack image targets (first: {missing[0]!r})"
            )
    batches_per_epoch = len(make_batches(dataset, config.batch_size, config.seed, start_epoch + 1))
    state = AdamWState.fresh(params, step=start_epoch * batches_per_epoch)
    records: list[BatchRecord] = []
    ckpts: list[str] = []
    metrics_fh = None
    if metrics_path is not None:
        try:
            metrics_fh = open(metrics_path, "a", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot open {metrics_path}: {exc}") from exc
    try:
        for epoch in range(start_epoch + 1, start_epoch + config.epochs + 1):
            for b_idx, batch in enumerate(
                make_batches(dataset, config.batch_size, config.seed, epoch)
            ):
                t0 = time.perf_counter()
                v, t_m, targets, t_orig = _batch_matrices(batch, config, image_targets)
                rngs = dropout_streams(config.seed, epoch, b_idx, len(batch))
                composed, _, cache = forward_batch(params, v, t_m, mode="train", rngs=rngs)
                breakdown = total_loss(composed, targets, t_orig, config.loss)
                if not np.isfinite(breakdown.l_total):
                    raise NonFiniteLossError(
                        f"epoch {epoch} batch {b_idx}: loss {breakdown.l_total} "
                        f"(pos {breakdown.l_pos}, neg' {breakdown.l_neg_prime}, "
                        f"caption {breakdown.l_caption_neg})"
                    )
                grads, _, _ = backward_batch(
                    params, cache, breakdown.grad_composed.astype(composed.dtype)
                )
                params, state = adamw_step(params, grads, state, config.adamw, config.learning_rate)
                rec = BatchRecord(
                    epoch=epoch,
                    batch=b_idx,
                    l_pos=breakdown.l_pos,
                    l_neg_prime=breakdown.l_neg_prime,
                    l_caption_neg=breakdown.l_caption_neg,
                    l_total=breakdown.l_total,
                    wall_ms=(time.perf_counter() - t0) * 1e3,
                )
                records.append(rec)
                if metrics_fh is not None:
                    metrics_fh.write(rec.to_json() + "\n")
            if checkpoint_dir is not None:
                path = f"{checkpoint_dir}/epoch_{epoch}.ckpt"
                save_checkpoint(params, path)
                ckpts.append(path)
            if metrics_fh is not None:
                metrics_fh.flush()
            epoch_recs = [r for r in records if r.epoch == epoch]
            log.info(
                "epoch %d: mean total loss %.6f over %d batches",
                epoch,
                sum(r.l_total for r in epoch_recs) / len(epoch_recs),
                len(epoch_recs),
            )
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(params=params, records=records, checkpoint_paths=ckpts)
