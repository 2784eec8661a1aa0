import numpy as np
import pytest

from conftest import TINY
from test_detector import feats
from breathscan.errors import TrainingAbort, ValidationError
from breathscan.labeling import MASK
from breathscan.nn.model import Detector
from breathscan.nn.optim import AdamW, linear_warmup_decay
from breathscan.nn.training import TrainConfig, TrainLog, frame_accuracy, make_batches, train_epochs


def dataset(n=6, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        F = int(rng.integers(3, 12))
        out.append((feats(F, seed=seed * 100 + i, uid=f"u{i}"), rng.integers(0, 2, F).astype(np.int8)))
    return out


def model():
    m = Detector(TINY, seed=0)
    m.fit_normalization([f for f, _ in dataset()])
    return m


def test_schedule():
    lrs = [linear_warmup_decay(s, 100, 1.0) for s in range(100)]
    assert lrs[9] == 1.0 and lrs[0] == pytest.approx(0.1)
    assert all(a <= b for a, b in zip(lrs[:10], lrs[1:10]))
    assert all(a >= b for a, b in zip(lrs[9:], lrs[10:]))
    assert lrs[-1] == 0.0
    assert linear_warmup_decay(0, 0, 1.0) == 0.0


def test_adamw_decoupled_decay():
    w = np.ones((2, 2))
    b = np.ones(2)
    opt = AdamW({"layer.weight": w, "layer.bias": b}, weight_decay=0.5)
    opt.step({"layer.weight": np.zeros((2, 2)), "layer.bias": np.zeros(2)}, lr=0.1)
    assert np.allclose(w, 0.95) and np.array_equal(b, np.ones(2))


def test_batches_cover_everything_once():
    rng = np.random.default_rng(0)
    lengths = list(rng.integers(1, 100, 37))
    batches = make_batches(lengths, 8, 2, rng)
    assert sorted(np.concatenate(batches).tolist()) == list(range(37))
    assert all(len(b) <= 8 for b in batches)


def test_zero_epochs_is_identity():
    m = model()
    before = m.fingerprint()
    train_epochs(m, dataset(), TrainConfig(epochs=0))
    assert m.fingerprint() == before


def test_training_is_deterministic_and_reduces_loss():
    a, b = model(), model()
    cfg = TrainConfig(epochs=15, batch_size=3, peak_lr=1e-2)
    log = TrainLog()
    train_epochs(a, dataset(), cfg, seed=5, train_log=log)
    train_epochs(b, dataset(), cfg, seed=5)
    assert a.fingerprint() == b.fingerprint()
    assert log.losses[-1] < log.losses[0] and log.steps == 15 * 2


def test_requires_unmasked_frame():
    data = [(f, np.full(f.n_frames, MASK)) for f, _ in dataset(2)]
    with pytest.raises(ValidationError):
        train_epochs(model(), data, TrainConfig(epochs=1))


def test_nan_loss_aborts_with_diagnostics():
    m = model()
    m.head.params["weight"][:] = np.nan
    with pytest.raises(TrainingAbort, match="batch ids"):
        train_epochs(m, dataset(), TrainConfig(epochs=1, batch_size=2))


def test_frame_accuracy_ignores_mask():
    m = model()
    f = feats(4)
    p = m.predict([f])[0]
    labels = np.where(p > 0.5, 1, 0).astype(np.int8)
    labels[0] = MASK
    assert frame_accuracy(m, [(f, labels)]) == 1.0
