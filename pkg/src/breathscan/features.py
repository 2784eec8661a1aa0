"""Frame-level acoustic features: log-mel spectrogram, ZCR, VMS and NA-VMS.

All streams share one frame clock. Frames start at sample 0 without
centering; a clip shorter than one window yields a single zero-padded frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, resample
from .errors import ConfigError, FormatError

__all__ = [
    "FrameConfig",
    "FeatureSequence",
    "RULE_PIPELINE",
    "MODEL_PIPELINE",
    "n_frames",
    "resampled_length",
    "frame_signal",
    "hz_to_mel",
    "mel_to_hz",
    "mel_filterbank",
    "log_mel_spectrogram",
    "zcr",
    "vms",
    "na_vms",
    "extract_features",
    "write_feature_dump",
    "read_feature_dump",
]

AMIN = 1e-10
TOP_DB = 80.0

FEATURE_MAGIC = b"BSFT"
FEATURE_VERSION = 1


@dataclass(frozen=True)
class FrameConfig:
    window_length: int
    hop_length: int
    n_mels: int
    sample_rate: int
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if not 0 < self.hop_length <= self.window_length:
            raise ConfigError("need 0 < hop_length <= window_length")
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.fmin < 0 or self.upper_frequency > self.sample_rate / 2 or self.fmin >= self.upper_frequency:
            raise ConfigError("need 0 <= fmin < fmax <= sample_rate / 2")

    @property
    def upper_frequency(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    @property
    def hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    def frame_center(self, index):
        """Center time in seconds of frame ``index``."""
        return (np.asarray(index) * self.hop_length + self.window_length / 2) / self.sample_rate


# rule annotation: 22.05 kHz, 256 mels, 256-sample window, 128-sample hop
RULE_PIPELINE = FrameConfig(window_length=256, hop_length=128, n_mels=256, sample_rate=22050)
# detector input: 16 kHz, 128 mels, 25 ms window, 10 ms hop
MODEL_PIPELINE = FrameConfig(window_length=400, hop_length=160, n_mels=128, sample_rate=16000)


@dataclass
class FeatureSequence:
    log_mel: np.ndarray  # [n_mels, F], dB
    zcr: np.ndarray  # [F]
    vms: np.ndarray  # [F], dB^2
    frame_config: FrameConfig
    utterance_id: str = ""
    num_samples: int | None = None

    def __post_init__(self):
        F = self.log_mel.shape[1]
        if self.zcr.shape != (F,) or self.vms.shape != (F,):
            raise ValueError("feature streams must share the frame count")

    @property
    def n_frames(self) -> int:
        return self.log_mel.shape[1]

    @property
    def duration(self) -> float | None:
        if self.num_samples is None:
            return None
        return self.num_samples / self.frame_config.sample_rate


def n_frames(num_samples: int, cfg: FrameConfig) -> int:
    if num_samples <= cfg.window_length:
        return 1
    return 1 + (num_samples - cfg.window_length) // cfg.hop_length


def resampled_length(num_samples: int, from_rate: int, to_rate: int) -> int:
    """Sample count produced by :func:`breathscan.audio_io.resample`."""
    if from_rate == to_rate:
        return num_samples
    return -(-num_samples * to_rate // from_rate)


def frame_signal(x: np.ndarray, cfg: FrameConfig) -> np.ndarray:
    """Return a read-only ``[F, window_length]`` view of ``x`` (zero-padded if short)."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < cfg.window_length:
        x = np.pad(x, (0, cfg.window_length - x.size))
    F = n_frames(x.size, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x, cfg.window_length)
    return frames[:: cfg.hop_length][:F]


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    lin = f / f_sp
    with np.errstate(divide="ignore"):
        log = min_log_mel + np.log(np.maximum(f, 1e-300) / min_log_hz) / logstep
    return np.where(f >= min_log_hz, log, lin)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_center_frequencies(cfg: FrameConfig) -> np.ndarray:
    """Center frequency (Hz) of each of the ``n_mels`` filters."""
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_frequency), cfg.n_mels + 2))
    return edges[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: FrameConfig) -> np.ndarray:
    """Area-normalized triangular filters, shape ``[n_mels, window_length // 2 + 1]``."""
    n_fft = cfg.window_length
    fft_freqs = np.linspace(0, cfg.sample_rate / 2, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_frequency), cfg.n_mels + 2))
    widths = np.diff(edges)
    ramps = edges[:, None] - fft_freqs[None, :]
    lower = -ramps[:-2] / widths[:-1, None]
    upper = ramps[2:] / widths[1:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    weights.setflags(write=False)
    return weights


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    # periodic Hann, as used for spectral analysis
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def power_to_db(power: np.ndarray) -> np.ndarray:
    db = 10.0 * np.log10(np.maximum(AMIN, power))
    return np.maximum(db, db.max() - TOP_DB)


def _check_rate(clip: AudioClip, cfg: FrameConfig):
    if clip.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"clip sampled at {clip.sample_rate} Hz but frame config expects {cfg.sample_rate} Hz"
        )


def log_mel_spectrogram(clip: AudioClip, cfg: FrameConfig) -> np.ndarray:
    """Log-scaled (dB) mel power spectrogram, shape ``[n_mels, F]``."""
    _check_rate(clip, cfg)
    frames = frame_signal(clip.samples, cfg) * _hann(cfg.window_length)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel = mel_filterbank(cfg) @ power.T
    return power_to_db(mel)


def zcr(clip: AudioClip, cfg: FrameConfig) -> np.ndarray:
    """Per-frame zero-crossing rate in [0, 1]; ``sgn(0)`` is taken as +1."""
    _check_rate(clip, cfg)
    frames = frame_signal(clip.samples, cfg)
    signs = np.where(frames >= 0, 1.0, -1.0)
    flips = 0.5 * np.abs(np.diff(signs, axis=1)).sum(axis=1)
    return flips / (cfg.window_length - 1)


def vms(log_mel: np.ndarray) -> np.ndarray:
    """Population variance of each frame's log-mel column."""
    log_mel = np.asarray(log_mel, dtype=np.float64)
    if log_mel.ndim != 2 or log_mel.shape[0] < 2:
        raise ConfigError("VMS needs a [n_mels >= 2, F] log-mel matrix")
    return log_mel.var(axis=0)


def na_vms(vms_segment) -> float:
    """Mean of min-max normalized VMS over a segment; 0 for a flat segment."""
    v = np.asarray(vms_segment, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("NA-VMS of an empty segment is undefined")
    lo, hi = v.min(), v.max()
    if hi == lo:
        return 0.0
    return float(np.mean((v - lo) / (hi - lo)))


def extract_features(clip: AudioClip, cfg: FrameConfig) -> FeatureSequence:
    """Extract all three frame streams, resampling the clip first if needed."""
    if clip.sample_rate != cfg.sample_rate:
        clip = resample(clip, cfg.sample_rate)
    lm = log_mel_spectrogram(clip, cfg)
    return FeatureSequence(lm, zcr(clip, cfg), vms(lm), cfg, clip.utterance_id, clip.samples.size)


def write_feature_dump(path, feats: FeatureSequence) -> None:
    n_mels, F = feats.log_mel.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, F, n_mels))
        fh.write(np.ascontiguousarray(feats.log_mel, dtype="<f4").tobytes())
        fh.write(np.asarray(feats.zcr, dtype="<f4").tobytes())
        fh.write(np.asarray(feats.vms, dtype="<f4").tobytes())


def read_feature_dump(path, frame_config: FrameConfig | None = None) -> FeatureSequence:
    """Read a ``.bsft`` dump. Values come back as float32 widened to float64."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise FormatError(f"{path}: not a feature dump")
    version, F, n_mels = struct.unpack("<III", data[4:16])
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature dump version {version}")
    expected = 16 + 4 * (n_mels * F + 2 * F)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    body = np.frombuffer(data, dtype="<f4", offset=16).astype(np.float64)
    lm = body[: n_mels * F].reshape(n_mels, F)
    z = body[n_mels * F: n_mels * F + F]
    v = body[n_mels * F + F:]
    cfg = frame_config or MODEL_PIPELINE
    return FeatureSequence(lm, z, v, cfg, Path(path).stem)
