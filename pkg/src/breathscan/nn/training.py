"""Mini-batch training of the detector with masked BCE."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingAbort, ValidationError
from ..labeling import MASK
from .layers import Context
from .model import Detector
from .optim import AdamW, linear_warmup_decay

log = logging.getLogger(__name__)

__all__ = ["TrainConfig", "TrainLog", "train_epochs", "make_batches", "frame_accuracy"]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    peak_lr: float = 2e-3
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    bucket_factor: int = 4


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)  # mean loss per epoch
    steps: int = 0


def make_batches(lengths, batch_size, bucket_factor, rng) -> list[np.ndarray]:
    """Shuffle, bucket by length within windows of ``batch_size * bucket_factor``, shuffle batches."""
    order = rng.permutation(len(lengths))
    window = batch_size * max(1, bucket_factor)
    batches = []
    for s in range(0, len(order), window):
        chunk = order[s:s + window]
        chunk = chunk[np.argsort([lengths[i] for i in chunk], kind="stable")]
        batches.extend(chunk[k:k + batch_size] for k in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def train_epochs(model: Detector, dataset, cfg: TrainConfig = TrainConfig(), seed: int = 0,
                 train_log: TrainLog | None = None) -> Detector:
    """Train ``model`` in place on ``(FeatureSequence, LabelSequence)`` pairs and return it.

    The learning rate ramps linearly from 0 to ``peak_lr`` over the first
    ``warmup_fraction`` of steps, then decays linearly to 0. Batch order and
    dropout masks are driven by ``seed``.
    """
    dataset = list(dataset)
    if cfg.epochs <= 0:
        return model
    if not dataset:
        raise ValidationError("training set is empty")
    if not any(np.any(np.asarray(getattr(lab, "labels", lab)) != MASK) for _, lab in dataset):
        raise ValidationError("training set has no unmasked frame")
    rng = np.random.default_rng(seed)
    lengths = [f.n_frames for f, _ in dataset]
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    params = dict(model.named_parameters())
    opt = AdamW(params, weight_decay=cfg.weight_decay)
    ctx = Context(train=True, rng=rng)
    train_log = train_log if train_log is not None else TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss, n = 0.0, 0
        for idx in make_batches(lengths, cfg.batch_size, cfg.bucket_factor, rng):
            batch = model.batch([dataset[i][0] for i in idx], [dataset[i][1] for i in idx])
            loss = model.loss_and_grad(batch, ctx)
            grads = dict(model.named_grads())
            if not math.isfinite(loss):
                norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch} step {step}; batch ids {batch.ids}; "
                    f"largest grad norms {sorted(norms.items(), key=lambda kv: -kv[1])[:3]}"
                )
            opt.step(grads, linear_warmup_decay(step, total, cfg.peak_lr, cfg.warmup_fraction))
            step += 1
            epoch_loss += loss
            n += 1
        train_log.losses.append(epoch_loss / max(n, 1))
        log.debug("epoch %d loss %.5f", epoch, train_log.losses[-1])
    train_log.steps += step
    return model


def frame_accuracy(model: Detector, dataset, threshold: float = 0.5) -> float:
    """Fraction of non-MASK frames whose thresholded prediction matches the label."""
    feats = [f for f, _ in dataset]
    probs = model.predict(feats)
    correct = total = 0
    for p, (_, lab) in zip(probs, dataset):
        y = np.asarray(getattr(lab, "labels", lab))
        valid = y != MASK
        correct += int(np.sum((p[valid] > threshold) == (y[valid] == 1)))
        total += int(valid.sum())
    return correct / total if total else 1.0
