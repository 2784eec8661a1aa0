import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from breathscan.audio_io import AudioClip
from breathscan.errors import ConfigError, FormatError
from breathscan.features import (MODEL_PIPELINE, RULE_PIPELINE, FrameConfig, extract_features,
                                 log_mel_spectrogram, mel_center_frequencies, mel_filterbank, n_frames,
                                 na_vms, read_feature_dump, resampled_length, vms, write_feature_dump, zcr)

SMALL = FrameConfig(window_length=64, hop_length=32, n_mels=16, sample_rate=8000)


def clip(x, sr=16000):
    return AudioClip(np.asarray(x, dtype=np.float64), sr, "c")


def test_frameconfig_invariants():
    with pytest.raises(ConfigError):
        FrameConfig(window_length=100, hop_length=200, n_mels=10, sample_rate=16000)
    with pytest.raises(ConfigError):
        FrameConfig(window_length=100, hop_length=10, n_mels=0, sample_rate=16000)
    with pytest.raises(ConfigError):
        FrameConfig(window_length=100, hop_length=10, n_mels=8, sample_rate=16000, fmax=9000)


def test_filterbank_matches_oracle():
    for cfg in (SMALL, MODEL_PIPELINE, RULE_PIPELINE):
        ref = oracles.filterbank(cfg.sample_rate, cfg.window_length, cfg.n_mels)
        assert np.allclose(mel_filterbank(cfg), ref, rtol=1e-10, atol=1e-14)


def test_silence_is_floor():
    lm = log_mel_spectrogram(clip(np.zeros(4000)), MODEL_PIPELINE)
    assert np.all(lm == -100.0)
    assert np.allclose(vms(lm), 0.0)


def test_sine_peaks_at_nearest_mel_bin():
    t = np.arange(16000) / 16000
    lm = log_mel_spectrogram(clip(0.5 * np.sin(2 * np.pi * 1000 * t)), MODEL_PIPELINE)
    centers = np.array([oracles.slaney_mel_to_hz(
        oracles.slaney_hz_to_mel(8000.0) * (i + 1) / 129) for i in range(128)])
    assert np.allclose(mel_center_frequencies(MODEL_PIPELINE), centers)
    expected = int(np.argmin(np.abs(centers - 1000.0)))
    assert np.all(np.argmax(lm, axis=0) == expected)


@pytest.mark.parametrize("n", [1, 100, 400, 401, 559, 560, 16000, 16001])
def test_frame_count_formula(n):
    x = np.random.default_rng(n).uniform(-0.5, 0.5, n)
    f = extract_features(clip(x), MODEL_PIPELINE)
    expected = 1 if n <= 400 else 1 + (n - 400) // 160
    assert f.n_frames == expected == n_frames(n, MODEL_PIPELINE)
    assert f.log_mel.shape == (128, expected) and f.zcr.shape == f.vms.shape == (expected,)


def test_log_mel_matches_oracle_on_short_clips(rng):
    for n in (10, 64, 65, 300):
        x = rng.uniform(-1, 1, n)
        ref = oracles.log_mel(x, 8000, 64, 32, 16)
        assert np.max(np.abs(log_mel_spectrogram(clip(x, 8000), SMALL) - ref)) < 1e-6


def test_zcr_examples():
    cfg = FrameConfig(window_length=4, hop_length=4, n_mels=2, sample_rate=8000)
    assert zcr(clip([1.0, 2.0, -1.0, -3.0], 8000), cfg).tolist() == [1 / 3]
    assert zcr(clip([0.1, 0.2, 0.3, 0.4], 8000), cfg).tolist() == [0.0]
    alt = (-1.0) ** np.arange(400)
    assert zcr(clip(alt), MODEL_PIPELINE).tolist() == [1.0]
    # sgn(0) = +1, so digital silence has no crossings
    assert zcr(clip(np.zeros(800)), MODEL_PIPELINE).max() == 0.0


def test_zcr_matches_oracle(rng):
    x = rng.standard_normal(1000)
    ref = [oracles.zcr_window(x[i * 32: i * 32 + 64]) for i in range(n_frames(1000, SMALL))]
    assert np.allclose(zcr(clip(x, 8000), SMALL), ref, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
def test_zcr_amplitude_invariant(c, seed):
    x = np.random.default_rng(seed).standard_normal(700)
    assert np.array_equal(zcr(clip(c * x, 8000), SMALL), zcr(clip(x, 8000), SMALL))


def test_vms_examples():
    assert vms(np.array([[3.0], [3.0], [3.0]])).tolist() == [0.0]
    assert vms(np.array([[0.0], [2.0]])).tolist() == [1.0]
    with pytest.raises(ConfigError):
        vms(np.zeros((1, 5)))


def test_na_vms_examples():
    assert na_vms(np.arange(11.0)) == 0.5
    assert na_vms([0, 0, 0, 0, 1]) == 0.2
    assert na_vms([4.0, 4.0, 4.0]) == 0.0
    with pytest.raises(ValueError):
        na_vms([])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=40), st.floats(1e-2, 1e2), st.floats(-1e3, 1e3))
def test_na_vms_affine_invariant(v, a, b):
    v = np.array(v)
    out = na_vms(v)
    assert 0.0 <= out <= 1.0
    if np.ptp(v) > 1e-6 * max(1.0, np.abs(v).max()):
        assert abs(na_vms(a * v + b) - out) < 1e-9


def test_extract_resamples_and_aligns():
    x = np.random.default_rng(0).uniform(-0.5, 0.5, 22050)
    f = extract_features(AudioClip(x, 22050, "u"), MODEL_PIPELINE)
    assert f.num_samples == resampled_length(22050, 22050, 16000) == 16000
    assert f.n_frames == n_frames(16000, MODEL_PIPELINE)
    assert np.all((f.zcr >= 0) & (f.zcr <= 1)) and np.all(f.vms >= 0)


def test_rate_mismatch_is_config_error():
    with pytest.raises(ConfigError):
        log_mel_spectrogram(clip(np.zeros(100), 8000), MODEL_PIPELINE)


def test_feature_dump_round_trip(tmp_path):
    f = extract_features(clip(np.random.default_rng(1).uniform(-1, 1, 3000)), MODEL_PIPELINE)
    write_feature_dump(tmp_path / "f.bsft", f)
    raw = (tmp_path / "f.bsft").read_bytes()
    assert raw[:4] == b"BSFT"
    g = read_feature_dump(tmp_path / "f.bsft", MODEL_PIPELINE)
    assert np.array_equal(g.log_mel, f.log_mel.astype(np.float32))
    assert np.array_equal(g.zcr, f.zcr.astype(np.float32))
    assert np.array_equal(g.vms, f.vms.astype(np.float32))
    (tmp_path / "bad.bsft").write_bytes(raw[:-3])
    with pytest.raises(FormatError):
        read_feature_dump(tmp_path / "bad.bsft")
