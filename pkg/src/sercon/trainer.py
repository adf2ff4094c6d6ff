"""Fine-tuning loop: paired-view batches, plain SGD, plateau learning-rate
decay, early stopping, and best-checkpoint tracking.

The loop is fully deterministic given its config seed: shuffling, view
augmentation, and weight init each draw from named substreams.  The test
split is never passed in; callers hand over explicit train/validation
sample lists (see ``corpus.split_by_fold``).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import encoder
from .augment import AugmentSpec, Waveform, fit_length, make_augmenter
from .corpus import LabeledEmbedding
from .errors import DataError, NumericsError
from .objective import ContrastiveBatch, LossConfig, ce_loss, combined_loss
from .rng import substream


@dataclass(frozen=True)
class TrainConfig:
    batch_n: int = 6              # originals per batch -> 2N = 12 instances
    max_epochs: int = 150
    lr0: float = 1e-4
    plateau_patience: int = 20
    lr_factor: float = 0.5
    min_lr: float = 1e-6
    max_len_seconds: float = 7.5
    hidden_dim: int = 64
    seed: int = 7
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)

    def __post_init__(self) -> None:
        if self.batch_n < 1:
            raise DataError("batch_n must be >= 1")
        if self.max_epochs < 0:
            raise DataError("max_epochs must be >= 0")
        if not (self.lr0 > 0):
            raise DataError("lr0 must be positive")
        if not (0.0 < self.lr_factor < 1.0):
            raise DataError("lr_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise DataError("plateau_patience must be >= 1")
        if not (0.0 < self.min_lr <= self.lr0):
            raise DataError("min_lr must lie in (0, lr0]")
        if self.hidden_dim < 1:
            raise DataError("hidden_dim must be >= 1")


@dataclass(frozen=True, eq=False)
class TrainState:
    params: encoder.HeadParams
    epoch: int
    lr: float
    best_val_loss: float
    epochs_since_improvement: int
    stop: bool = False


# Strict-decrease tolerance for "the validation loss has not decreased".
_IMPROVE_EPS = 1e-12


def plateau_schedule(state: TrainState, val_loss: float, cfg: TrainConfig) -> TrainState:
    """Decay the learning rate after ``plateau_patience`` epochs without a
    strictly lower validation loss; flag a stop once decay can no longer act."""
    if not math.isfinite(val_loss):
        raise NumericsError(f"non-finite validation loss at epoch {state.epoch}")
    if val_loss < state.best_val_loss - _IMPROVE_EPS:
        return replace(state, best_val_loss=val_loss, epochs_since_improvement=0)
    counter = state.epochs_since_improvement + 1
    if counter < cfg.plateau_patience:
        return replace(state, epochs_since_improvement=counter)
    new_lr = max(state.lr * cfg.lr_factor, cfg.min_lr)
    stop = new_lr == state.lr == cfg.min_lr
    return replace(state, lr=new_lr, epochs_since_improvement=0, stop=stop)


def sgd_step(params: encoder.HeadParams, grads: encoder.HeadParams, lr: float) -> encoder.HeadParams:
    """Vanilla gradient step, no momentum: params - lr * grads."""
    if not (lr > 0):
        raise DataError("learning rate must be positive")
    return encoder.HeadParams(
        w1=params.w1 - lr * grads.w1,
        b1=params.b1 - lr * grads.b1,
        w2=params.w2 - lr * grads.w2,
        b2=params.b2 - lr * grads.b2,
    )


def _payload_and_label(item, max_len_seconds: float):
    if isinstance(item, LabeledEmbedding):
        return item.x, item.meta.label, item.meta.id
    if isinstance(item, tuple) and len(item) == 2 and isinstance(item[0], Waveform):
        return item[0], int(item[1]), None
    raise DataError(f"cannot batch item of type {type(item).__name__}")


def _to_vector(payload, max_len_seconds: float) -> np.ndarray:
    if isinstance(payload, Waveform):
        return fit_length(payload, max_len_seconds).samples
    return np.asarray(payload, dtype=np.float64)


def build_batch(
    originals: Sequence,
    augmenter: Callable,
    seed: int | np.random.Generator,
    max_len_seconds: float = 7.5,
) -> ContrastiveBatch:
    """Pair each original with one augmented view.

    ``originals`` may be LabeledEmbedding objects or (Waveform, label)
    tuples; waveforms are truncated/zero-padded to ``max_len_seconds`` so
    all rows have equal length.  Row 2k holds the view of original row
    2k+1, and both carry the original's label.
    """
    if not originals:
        raise DataError("cannot build a batch from zero originals")
    rng = seed if isinstance(seed, np.random.Generator) else substream(seed, "augment")
    orig_rows, view_rows, labels = [], [], []
    for idx, item in enumerate(originals):
        payload, label, uid = _payload_and_label(item, max_len_seconds)
        try:
            view = augmenter(payload, rng)
        except Exception as exc:
            who = uid if uid is not None else f"batch item {idx}"
            raise DataError(f"augmentation failed for {who}: {exc}") from exc
        orig_rows.append(_to_vector(payload, max_len_seconds))
        view_rows.append(_to_vector(view, max_len_seconds))
        labels.append(label)
    return ContrastiveBatch.from_views(
        np.stack(orig_rows), np.stack(view_rows), np.asarray(labels)
    )


def _chunks(order: np.ndarray, size: int):
    for start in range(0, order.size, size):
        yield order[start:start + size]


def train_fold(
    train: Sequence[LabeledEmbedding],
    val: Sequence[LabeledEmbedding],
    cfg: TrainConfig,
    n_classes: int,
) -> tuple[encoder.HeadParams, list[dict]]:
    """Train on one fold's train split, selecting the checkpoint with the
    lowest validation cross-entropy.

    Returns (best params, per-epoch log records of the form
    {epoch, train_loss, val_loss, lr, seconds}).
    """
    if not train:
        raise DataError("training split is empty")
    if not val:
        raise DataError("validation split is empty")
    dim = train[0].dim
    params = encoder.init_params(dim, cfg.hidden_dim, n_classes, cfg.seed)
    augmenter = make_augmenter(cfg.augment)
    val_x = np.stack([e.x for e in val]).astype(np.float64)
    val_y = np.asarray([e.meta.label for e in val])

    state = TrainState(
        params=params, epoch=0, lr=cfg.lr0, best_val_loss=np.inf, epochs_since_improvement=0
    )
    best_params = params
    best_val = np.inf
    log: list[dict] = []

    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = state.lr
        order = substream(cfg.seed, "shuffle", epoch).permutation(len(train))
        aug_rng = substream(cfg.seed, "augment", epoch)
        loss_sum = 0.0
        instance_count = 0
        for batch_idx, chunk in enumerate(_chunks(order, cfg.batch_n)):
            batch = build_batch(
                [train[i] for i in chunk], augmenter, aug_rng, cfg.max_len_seconds
            )
            trace = encoder.forward_batch(params, batch.embeddings)
            zbatch = batch.with_embeddings(trace.hidden)
            loss, g_logits, g_emb = combined_loss(trace.logits, zbatch, cfg.loss)
            if not math.isfinite(loss):
                raise NumericsError(f"non-finite loss in epoch {epoch}, batch {batch_idx}")
            grads = encoder.backward(params, trace, g_emb, g_logits)
            if not grads.all_finite():
                raise NumericsError(f"non-finite gradient in epoch {epoch}, batch {batch_idx}")
            params = sgd_step(params, grads, lr)
            loss_sum += loss * batch.size
            instance_count += batch.size

        val_trace = encoder.forward_batch(params, val_x)
        val_loss, _ = ce_loss(val_trace.logits, val_y)
        if val_loss < best_val:
            best_val = val_loss
            best_params = params
        state = plateau_schedule(replace(state, params=params, epoch=epoch), val_loss, cfg)
        log.append(
            {
                "epoch": epoch,
                "train_loss": loss_sum / instance_count,
                "val_loss": val_loss,
                "lr": lr,
                "seconds": time.perf_counter() - t0,
            }
        )
        if state.stop:
            break
    return best_params, log
