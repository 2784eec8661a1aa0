"""Frame-wise breath detector: conv subsampling, conformer blocks, transposed-conv
upsampling, BiLSTM decoder and a sigmoid head."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ..errors import ConfigError, ValidationError
from ..features import FeatureSequence
from ..labeling import MASK
from .layers import (
    EVAL,
    BiLSTM,
    ConformerBlock,
    Context,
    Conv2dSubsample,
    ConvTranspose1d,
    Dropout,
    Linear,
    Module,
    apply_mask,
    sigmoid,
    swish,
    swish_grad,
)

__all__ = [
    "DetectorConfig",
    "Detector",
    "Batch",
    "make_batch",
    "masked_bce_loss",
    "masked_bce_with_grad",
    "BCE_EPS",
]

BCE_EPS = 1e-7


@dataclass(frozen=True)
class DetectorConfig:
    n_mels: int = 128
    n_blocks: int = 2
    hidden_size: int = 32
    n_heads: int = 4
    conv_kernel: int = 15
    dropout: float = 0.1
    subsample_channels: int = 8
    ff_expansion: int = 4
    max_rel_distance: int = 16
    use_zcr: bool = True
    use_vms: bool = True
    preset: str = "desk"

    def __post_init__(self):
        if self.hidden_size % self.n_heads:
            raise ConfigError("hidden_size must be divisible by n_heads")
        if self.hidden_size % 2:
            raise ConfigError("hidden_size must be even (BiLSTM halves it per direction)")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.conv_kernel % 2 != 1:
            raise ConfigError("conv_kernel must be odd")
        if self.n_mels < 1 or self.n_blocks < 0:
            raise ConfigError("n_mels must be >= 1 and n_blocks >= 0")

    @property
    def input_channels(self) -> int:
        return 1 + int(self.use_zcr) + int(self.use_vms)

    @classmethod
    def paper(cls, **overrides):
        base = cls(n_mels=128, n_blocks=8, hidden_size=256, n_heads=4, conv_kernel=31,
                   dropout=0.1, subsample_channels=256, preset="paper")
        return replace(base, **overrides)

    @classmethod
    def desk(cls, **overrides):
        return replace(cls(), **overrides)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class Batch:
    inputs: np.ndarray  # [B, T, n_mels, C], normalized, zero beyond each length
    lengths: np.ndarray  # [B]
    labels: np.ndarray | None = None  # [B, T] int8 with MASK on masked and padded frames
    ids: list = field(default_factory=list)

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.inputs.shape[1])[None, :] < self.lengths[:, None]


def _stack_channels(feats: FeatureSequence, cfg: DetectorConfig):
    F = feats.n_frames
    chans = [feats.log_mel.T]
    if cfg.use_zcr:
        chans.append(np.broadcast_to(feats.zcr[:, None], (F, cfg.n_mels)))
    if cfg.use_vms:
        chans.append(np.broadcast_to(feats.vms[:, None], (F, cfg.n_mels)))
    return np.stack(chans, axis=-1)


def make_batch(features, cfg: DetectorConfig, norm_mean, norm_std, labels=None,
               dtype=np.float32) -> Batch:
    """Stack utterances into a zero-padded, per-channel-normalized batch."""
    features = list(features)
    if not features:
        raise ValidationError("empty batch")
    lengths = np.array([f.n_frames for f in features])
    if lengths.min() < 1:
        raise ValidationError("every utterance needs at least one frame")
    for f in features:
        if f.log_mel.shape[0] != cfg.n_mels:
            raise ValidationError(
                f"{f.utterance_id}: expected {cfg.n_mels} mel bins, got {f.log_mel.shape[0]}")
    T = int(lengths.max())
    x = np.zeros((len(features), T, cfg.n_mels, cfg.input_channels), dtype=dtype)
    mean = np.asarray(norm_mean, dtype=np.float64)
    std = np.asarray(norm_std, dtype=np.float64)
    for b, f in enumerate(features):
        x[b, :f.n_frames] = (_stack_channels(f, cfg) - mean) / std
    y = None
    if labels is not None:
        y = np.full((len(features), T), MASK, dtype=np.int8)
        for b, lab in enumerate(labels):
            lab = np.asarray(getattr(lab, "labels", lab))
            if lab.size != lengths[b]:
                raise ValidationError(
                    f"{features[b].utterance_id}: {lab.size} labels for {lengths[b]} frames")
            y[b, :lab.size] = lab
    return Batch(x, lengths, y, [f.utterance_id for f in features])


def masked_bce_with_grad(logits: np.ndarray, labels: np.ndarray):
    """Mean clamped BCE over non-MASK frames and its gradient w.r.t. the logits."""
    p = sigmoid(logits)
    valid = labels != MASK
    n = int(valid.sum())
    grad = np.zeros_like(logits)
    if n == 0:
        return 0.0, p, grad
    pv = p[valid].astype(np.float64)
    yv = labels[valid].astype(np.float64)
    pc = np.clip(pv, BCE_EPS, 1 - BCE_EPS)
    loss = float(-np.mean(yv * np.log(pc) + (1 - yv) * np.log(1 - pc)))
    inside = (pv >= BCE_EPS) & (pv <= 1 - BCE_EPS)
    grad[valid] = np.where(inside, (pv - yv) / n, 0.0)
    return loss, p, grad


def masked_bce_loss(probs, labels) -> float:
    """Mean binary cross-entropy over frames whose label is not MASK."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(getattr(labels, "labels", labels))
    if probs.shape != labels.shape:
        raise ValidationError("probs and labels must have equal length")
    valid = labels != MASK
    if not valid.any():
        return 0.0
    p = np.clip(probs[valid], BCE_EPS, 1 - BCE_EPS)
    y = labels[valid].astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


class Detector(Module):
    def __init__(self, cfg: DetectorConfig, seed: int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c, d = cfg.subsample_channels, cfg.hidden_size
        self.conv1 = self.add("subsample1", Conv2dSubsample(cfg.input_channels, c, rng, dtype))
        self.conv2 = self.add("subsample2", Conv2dSubsample(c, c, rng, dtype))
        m4 = Conv2dSubsample.out_size(Conv2dSubsample.out_size(cfg.n_mels))
        self.proj = self.add("projection", Linear(c * m4, d, rng, dtype))
        self.proj_drop = Dropout(cfg.dropout)
        self.blocks = [
            self.add(f"block{i}", ConformerBlock(d, cfg.n_heads, cfg.conv_kernel, cfg.dropout, rng,
                                                 cfg.ff_expansion, cfg.max_rel_distance, dtype))
            for i in range(cfg.n_blocks)
        ]
        self.up1 = self.add("upsample1", ConvTranspose1d(d, d, rng, dtype))
        self.up2 = self.add("upsample2", ConvTranspose1d(d, d, rng, dtype))
        self.lstm = self.add("decoder", BiLSTM(d, d // 2, rng, dtype))
        self.head = self.add("head", Linear(d, 1, rng, dtype))
        # input normalization statistics; not trained
        self.norm_mean = np.zeros(cfg.input_channels)
        self.norm_std = np.ones(cfg.input_channels)

    @property
    def dtype(self):
        return self.head.params["weight"].dtype

    def fit_normalization(self, features) -> None:
        """Set per-channel mean/std from a corpus of feature sequences."""
        s = np.zeros(self.cfg.input_channels)
        s2 = np.zeros(self.cfg.input_channels)
        n = 0
        for f in features:
            x = _stack_channels(f, self.cfg)
            s += x.sum(axis=(0, 1))
            s2 += (x.astype(np.float64) ** 2).sum(axis=(0, 1))
            n += x.shape[0] * x.shape[1]
        if n == 0:
            raise ValidationError("cannot fit normalization on an empty corpus")
        mean = s / n
        std = np.sqrt(np.maximum(s2 / n - mean ** 2, 0.0)) + 1e-5
        # float32-representable so checkpoints round-trip exactly
        self.norm_mean = mean.astype(np.float32).astype(np.float64)
        self.norm_std = std.astype(np.float32).astype(np.float64)

    def batch(self, features, labels=None) -> Batch:
        return make_batch(features, self.cfg, self.norm_mean, self.norm_std, labels, self.dtype)

    def forward_logits(self, batch: Batch, ctx: Context = EVAL):
        """Return ``([B, T] logits, cache)`` for a padded batch."""
        x, L = batch.inputs, batch.lengths
        T = x.shape[1]
        if T == 0:
            raise ValidationError("input has zero frames")
        L1 = Conv2dSubsample.out_size(L)
        L2 = Conv2dSubsample.out_size(L1)
        U1 = ConvTranspose1d.out_size(L2)
        U2 = ConvTranspose1d.out_size(U1)

        def seq_mask(lengths, n):
            return np.arange(n)[None, :] < lengths[:, None]

        caches = {}
        h, caches["c1"] = self.conv1.forward(x)
        a1 = h
        m1 = seq_mask(L1, h.shape[1])
        h = np.maximum(h, 0) * m1[:, :, None, None]
        h, caches["c2"] = self.conv2.forward(h)
        a2 = h
        m2 = seq_mask(L2, h.shape[1])
        h = np.maximum(h, 0) * m2[:, :, None, None]
        B, T2, M4, C = h.shape
        h, caches["proj"] = self.proj.forward(h.reshape(B, T2, M4 * C))
        h, caches["proj_drop"] = self.proj_drop.forward(h, ctx)
        h = apply_mask(h, m2)
        for i, blk in enumerate(self.blocks):
            h, caches[f"b{i}"] = blk.forward(h, m2, ctx)
            h = apply_mask(h, m2)
        h, caches["u1"] = self.up1.forward(h)
        u1 = h
        mu1 = seq_mask(U1, h.shape[1])
        h = apply_mask(swish(h), mu1)
        h, caches["u2"] = self.up2.forward(h)
        u2 = h
        mu2 = seq_mask(U2, h.shape[1])
        h = apply_mask(swish(h), mu2)
        full = h.shape[1]
        if full >= T:
            h = h[:, :T]
        else:
            h = np.pad(h, ((0, 0), (0, T - full), (0, 0)))
        m = seq_mask(L, T)
        h, caches["lstm"] = self.lstm.forward(h, m)
        h = apply_mask(h, m)
        logits, caches["head"] = self.head.forward(h)
        logits = logits[..., 0]
        return logits, (caches, a1, m1, a2, m2, (B, T2, M4, C), u1, mu1, u2, mu2, full, m, T)

    def backward(self, dlogits, cache, need_input_grad=False):
        caches, a1, m1, a2, m2, shp, u1, mu1, u2, mu2, full, m, T = cache
        d = self.head.backward(dlogits[..., None], caches["head"])
        d = apply_mask(d, m)
        d = self.lstm.backward(d, caches["lstm"])
        if full >= T:
            d = np.pad(d, ((0, 0), (0, full - T), (0, 0)))
        else:
            d = d[:, :full]
        d = self.up2.backward(apply_mask(d, mu2) * swish_grad(u2), caches["u2"])
        d = self.up1.backward(apply_mask(d, mu1) * swish_grad(u1), caches["u1"])
        for i in range(len(self.blocks) - 1, -1, -1):
            d = self.blocks[i].backward(apply_mask(d, m2), caches[f"b{i}"])
        d = apply_mask(d, m2)
        d = self.proj_drop.backward(d, caches["proj_drop"])
        d = self.proj.backward(d, caches["proj"]).reshape(shp)
        d = d * m2[:, :, None, None] * (a2 > 0)
        d = self.conv2.backward(d, caches["c2"])
        d = d * m1[:, :, None, None] * (a1 > 0)
        return self.conv1.backward(d, caches["c1"], need_input_grad)

    def predict_batch(self, batch: Batch) -> list[np.ndarray]:
        logits, _ = self.forward_logits(batch, EVAL)
        p = sigmoid(logits.astype(np.float64))
        return [p[b, :n].copy() for b, n in enumerate(batch.lengths)]

    def predict(self, features, batch_size: int = 16) -> list[np.ndarray]:
        """Per-utterance breath probabilities, one per input frame."""
        features = list(features)
        order = sorted(range(len(features)), key=lambda i: features[i].n_frames)
        out = [None] * len(features)
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            probs = self.predict_batch(self.batch([features[i] for i in idx]))
            for i, p in zip(idx, probs):
                out[i] = p
        return out

    def loss_and_grad(self, batch: Batch, ctx: Context = EVAL) -> float:
        """Forward + backward on ``batch``; gradients are left in ``self.grads``."""
        logits, cache = self.forward_logits(batch, ctx)
        labels = np.where(batch.mask, batch.labels, MASK).astype(np.int8)
        loss, _, dlogits = masked_bce_with_grad(logits, labels)
        self.zero_grad()
        self.backward(dlogits.astype(logits.dtype), cache)
        return loss

    def state(self) -> dict[str, np.ndarray]:
        return dict(self.named_parameters())

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ValidationError(f"parameter set mismatch: {missing[:5]}")
        for name, value in state.items():
            if own[name].shape != value.shape:
                raise ValidationError(f"shape mismatch for {name}")
            own[name][...] = value

    def copy(self) -> "Detector":
        other = Detector(self.cfg, seed=0, dtype=self.dtype)
        other.load_state(self.state())
        other.norm_mean = self.norm_mean.copy()
        other.norm_std = self.norm_std.copy()
        return other

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, value in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value).tobytes())
        h.update(np.asarray(self.norm_mean, dtype=np.float64).tobytes())
        h.update(np.asarray(self.norm_std, dtype=np.float64).tobytes())
        return h.hexdigest()
