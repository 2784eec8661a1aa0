import numpy as np
import pytest

from conftest import TINY
from breathscan.errors import FormatError, ValidationError
from breathscan.features import MODEL_PIPELINE, FeatureSequence
from breathscan.labeling import MASK
from breathscan.nn import layers as L
from breathscan.nn.checkpoint import load_checkpoint, save_checkpoint
from breathscan.nn.gradcheck import check_module, grad_check, numeric_grad, relative_error
from breathscan.nn.model import Detector, DetectorConfig, masked_bce_loss, masked_bce_with_grad

TOL = 1e-3


def feats(F, n_mels=6, seed=0, uid="u"):
    rng = np.random.default_rng(seed)
    return FeatureSequence(rng.normal(-40, 10, (n_mels, F)), rng.random(F), rng.random(F) * 50,
                           MODEL_PIPELINE, uid)


def _rng():
    return np.random.default_rng(7)


def _mask(B, T, lengths):
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def layer_cases():
    rng = _rng()
    f64 = np.float64
    x3 = rng.standard_normal((2, 5, 4))
    mask = _mask(2, 5, [5, 3])
    lin = L.Linear(4, 3, rng, f64)
    ln = L.LayerNorm(4, f64)
    ln.params["gain"][:] = rng.standard_normal(4)
    ln.params["bias"][:] = rng.standard_normal(4)
    conv = L.Conv2dSubsample(2, 3, rng, f64)
    dw = L.DepthwiseConv1d(4, 3, rng, f64)
    up = L.ConvTranspose1d(4, 3, rng, f64)
    lstm = L.BiLSTM(4, 3, rng, f64)
    att = L.RelPosSelfAttention(4, 2, rng, max_distance=2, dtype=f64)
    att.params["rel_bias"][:] = rng.standard_normal(att.params["rel_bias"].shape)
    ff = L.FeedForward(4, 2, 0.1, rng, f64)
    cm = L.ConvModule(4, 3, 0.1, rng, f64)
    blk = L.ConformerBlock(4, 2, 3, 0.1, rng, ff_expansion=2, max_distance=2, dtype=f64)
    blk.att.params["rel_bias"][:] = rng.standard_normal(blk.att.params["rel_bias"].shape)
    return {
        "linear": (lin, lin.forward, lin.backward, x3.copy()),
        "layernorm": (ln, ln.forward, ln.backward, x3.copy()),
        "conv2d_subsample": (conv, conv.forward, conv.backward, rng.standard_normal((2, 5, 6, 2))),
        "depthwise_conv1d": (dw, dw.forward, dw.backward, x3.copy()),
        "conv_transpose1d": (up, up.forward, up.backward, x3.copy()),
        "bilstm": (lstm, lambda x: lstm.forward(x, mask), lstm.backward, x3.copy()),
        "rel_pos_attention": (att, lambda x: att.forward(x, mask), att.backward, x3.copy()),
        "feed_forward": (ff, ff.forward, ff.backward, x3.copy()),
        "conv_module": (cm, lambda x: cm.forward(x, mask), cm.backward, x3.copy()),
        "conformer_block": (blk, lambda x: blk.forward(x, mask), blk.backward, x3.copy()),
    }


@pytest.mark.parametrize("name", list(layer_cases()))
def test_layer_gradients(name):
    module, fwd, bwd, x = layer_cases()[name]
    errors = check_module(fwd, bwd, module, x)
    assert max(errors.values()) < TOL, errors


def test_single_linear_closed_form():
    rng = _rng()
    lin = L.Linear(5, 1, rng, np.float64)
    x = rng.standard_normal((1, 9, 5))
    y = rng.integers(0, 2, (1, 9)).astype(np.int8)
    y[0, 2] = MASK
    logits, cache = lin.forward(x)
    loss, p, dlogits = masked_bce_with_grad(logits[..., 0], y)
    lin.zero_grad()
    lin.backward(dlogits[..., None], cache)
    valid = y[0] != MASK
    expected = ((p[0] - y[0])[valid][:, None] * x[0][valid]).sum(axis=0) / valid.sum()
    assert relative_error(lin.grads["weight"][:, 0], expected) < 1e-10
    assert np.max(np.abs(lin.grads["weight"][:, 0] - expected)) < 1e-10


def test_composed_model_grad_check(tiny_model):
    assert tiny_model.num_parameters() <= 5000
    fs = [feats(7, seed=1, uid="a"), feats(4, seed=2, uid="b")]
    rng = np.random.default_rng(0)
    labels = [rng.integers(0, 2, 7), np.array([1, MASK, 0, 1])]
    batch = tiny_model.batch(fs, labels)
    assert grad_check(tiny_model, batch) < TOL


def test_all_mask_gradients_are_zero(tiny_model):
    batch = tiny_model.batch([feats(5)], [np.full(5, MASK)])
    loss = tiny_model.loss_and_grad(batch)
    assert loss == 0.0
    assert all(not np.any(g) for _, g in tiny_model.named_grads())


@pytest.mark.parametrize("F", [1, 2, 3, 4, 7, 100, 101])
def test_output_length(F):
    m = Detector(DetectorConfig(), seed=0)
    (p,) = m.predict([feats(F, n_mels=128)])
    assert p.shape == (F,) and np.all((p > 0) & (p < 1))


def test_zero_frames_rejected(tiny_model):
    with pytest.raises(ValidationError):
        tiny_model.batch([FeatureSequence(np.zeros((6, 0)), np.zeros(0), np.zeros(0), MODEL_PIPELINE, "e")])


def test_zero_parameters_give_one_half(tiny_model):
    for _, v in tiny_model.named_parameters():
        v[...] = 0
    assert np.all(tiny_model.predict([feats(9)])[0] == 0.5)


def test_eval_is_deterministic(tiny_model):
    f = [feats(3)]
    assert np.array_equal(tiny_model.predict(f)[0], tiny_model.predict(f)[0])


def test_padding_insulation():
    m = Detector(DetectorConfig(), seed=1)
    fs = [feats(n, n_mels=128, seed=n, uid=str(n)) for n in (5, 23, 40)]
    batched = m.predict_batch(m.batch(fs))
    for f, pb in zip(fs, batched):
        assert np.max(np.abs(pb - m.predict([f])[0])) < 1e-5


def test_masked_bce_examples():
    assert masked_bce_loss([0.5, 0.5], [0, 1]) == pytest.approx(np.log(2))
    assert masked_bce_loss([0.9], [1]) == pytest.approx(-np.log(0.9))
    assert masked_bce_loss([0.3, 0.7], [MASK, MASK]) == 0.0
    assert masked_bce_loss([0.0], [1]) == pytest.approx(-np.log(1e-7))


def test_mask_insulation():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((3, 12))
    labels = rng.choice([0, 1, MASK], size=(3, 12)).astype(np.int8)
    loss, _, grad = masked_bce_with_grad(logits, labels)
    perturbed = logits + np.where(labels == MASK, rng.standard_normal(logits.shape) * 10, 0.0)
    loss2, _, grad2 = masked_bce_with_grad(perturbed, labels)
    assert loss2 == loss and np.array_equal(grad, grad2)
    assert np.all(grad[labels == MASK] == 0)


def test_monotone_head():
    z = np.linspace(-3, 3, 7)
    base = L.sigmoid(z)
    for i in range(z.size):
        bumped = z.copy()
        bumped[i] += 0.5
        diff = L.sigmoid(bumped) - base
        assert diff[i] > 0 and np.all(np.delete(diff, i) == 0)


def test_desk_and_paper_presets():
    desk = Detector(DetectorConfig.desk(), seed=0)
    assert desk.num_parameters() <= 200_000
    paper = DetectorConfig.paper()
    assert (paper.n_blocks, paper.hidden_size, paper.n_heads, paper.conv_kernel, paper.dropout) == (8, 256, 4, 31, 0.1)
    assert DetectorConfig(use_zcr=False, use_vms=False).input_channels == 1


def test_checkpoint_round_trip(tmp_path):
    m = Detector(DetectorConfig(), seed=4)
    m.fit_normalization([feats(30, n_mels=128)])
    digest = save_checkpoint(m, tmp_path / "m.bsck")
    manifest = (tmp_path / "m.bsck.manifest").read_text()
    assert f"sha256\t{digest}" in manifest and f"total_parameters\t{m.num_parameters()}" in manifest
    assert (tmp_path / "m.bsck").read_bytes()[:4] == b"BSCK"
    m2 = load_checkpoint(tmp_path / "m.bsck")
    assert m2.fingerprint() == m.fingerprint()
    f = [feats(17, n_mels=128)]
    assert np.array_equal(m.predict(f)[0], m2.predict(f)[0])
    (tmp_path / "bad.bsck").write_bytes((tmp_path / "m.bsck").read_bytes()[:100])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.bsck")


def test_numeric_grad_of_quadratic():
    a = np.array([1.0, -2.0, 3.0])
    g = numeric_grad(lambda: float(np.sum(a ** 2)), a)
    assert np.allclose(g, 2 * np.array([1.0, -2.0, 3.0]))


def test_sampled_grad_check_on_desk_model():
    m = Detector(DetectorConfig(), seed=3, dtype=np.float64)
    fs = [feats(6, n_mels=128, seed=1, uid="a"), feats(5, n_mels=128, seed=2, uid="b")]
    m.fit_normalization(fs)
    batch = m.batch(fs, [np.array([1, 0, 1, 1, 0, 0]), np.array([0, MASK, 1, 1, 0])])
    # a full-size model has ReLU inputs within 1e-4 of zero, so a second, smaller step is tried
    assert grad_check(m, batch, max_entries=3, steps=(1e-4, 1e-5)) < TOL
