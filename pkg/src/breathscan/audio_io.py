"""Audio loading, resampling and pause-interval parsing."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import FormatError, UnsupportedCodecError, ValidationError

__all__ = [
    "AudioClip",
    "PauseInterval",
    "load_wav",
    "write_wav",
    "resample",
    "parse_pause_file",
    "write_pause_file",
]

_PCM = 1
_IEEE_FLOAT = 3
_EXTENSIBLE = 0xFFFE


@dataclass
class AudioClip:
    """Mono PCM signal scaled to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    utterance_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValidationError("AudioClip samples must be one-dimensional")
        if self.samples.size == 0:
            raise ValidationError("AudioClip samples must be non-empty")
        if int(self.sample_rate) <= 0:
            raise ValidationError(f"sample rate must be positive, got {self.sample_rate}")
        self.sample_rate = int(self.sample_rate)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, order=True)
class PauseInterval:
    utterance_id: str
    start: float
    end: float

    @property
    def duration(self) -> float:
        return self.end - self.start


def _read_chunks(data: bytes, path) -> dict:
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")
    chunks = {}
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(
                f"{path}: chunk {cid!r} claims {size} bytes but only {len(body)} present"
            )
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    return chunks


def load_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file as a mono clip.

    Multi-channel audio is averaged to mono. The utterance id is the file stem.
    """
    path = Path(path)
    data = path.read_bytes()
    chunks = _read_chunks(data, path)
    if b"fmt " not in chunks or b"data" not in chunks:
        raise FormatError(f"{path}: missing fmt or data chunk")
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise FormatError(f"{path}: fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels < 1 or rate < 1:
        raise FormatError(f"{path}: invalid channel count or sample rate")

    if tag == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedCodecError(f"{path}: format tag {tag} with {bits} bits is not supported")

    raw = chunks[b"data"]
    frame_bytes = dtype.itemsize * channels
    n_frames = len(raw) // frame_bytes
    if n_frames == 0:
        raise FormatError(f"{path}: no audio frames")
    x = np.frombuffer(raw[: n_frames * frame_bytes], dtype=dtype).astype(np.float64) * scale
    x = x.reshape(n_frames, channels).mean(axis=1)
    np.clip(x, -1.0, 1.0, out=x)
    return AudioClip(x, rate, path.stem)


def write_wav(path, clip: AudioClip, encoding: str = "pcm16") -> None:
    """Write a mono WAV file. ``encoding`` is ``"pcm16"`` or ``"float32"``."""
    x = np.clip(clip.samples, -1.0, 1.0)
    if encoding == "pcm16":
        payload = np.round(x * 32768.0).clip(-32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _IEEE_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, clip.sample_rate, clip.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


@lru_cache(maxsize=16)
def _polyphase_filter(up: int, down: int, taps_per_phase: int, beta: float) -> np.ndarray:
    h = signal.firwin(taps_per_phase * up, 1.0 / max(up, down), window=("kaiser", beta))
    # unit DC gain per phase (resample_poly rescales by ``up``)
    for p in range(up):
        h[p::up] /= h[p::up].sum() * up
    h.setflags(write=False)
    return h


def resample(clip: AudioClip, target_rate: int, taps_per_phase: int = 64,
             beta: float = 8.0) -> AudioClip:
    """Band-limited polyphase resampling with a Kaiser-windowed sinc."""
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError(f"target rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return AudioClip(clip.samples.copy(), clip.sample_rate, clip.utterance_id)
    g = math.gcd(clip.sample_rate, target_rate)
    up, down = target_rate // g, clip.sample_rate // g
    h = _polyphase_filter(up, down, taps_per_phase, beta)
    y = signal.resample_poly(clip.samples, up, down, window=h, padtype="line")
    return AudioClip(np.clip(y, -1.0, 1.0), target_rate, clip.utterance_id)


def parse_pause_file(path) -> dict[str, list[PauseInterval]]:
    """Parse ``utterance_id<TAB>start<TAB>end`` lines into sorted per-utterance lists.

    Raises :class:`ValidationError` carrying the offending line number for
    malformed, inverted or overlapping intervals.
    """
    grouped: dict[str, list[tuple[PauseInterval, int]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.rstrip("\r\n")
            if not text.strip() or text.lstrip().startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) < 3:
                raise ValidationError(f"expected 3 tab-separated fields, got {len(parts)}",
                                      line=lineno)
            utt = parts[0].strip()
            try:
                start, end = float(parts[1]), float(parts[2])
            except ValueError:
                raise ValidationError("start/end must be numbers", line=lineno) from None
            if not (math.isfinite(start) and math.isfinite(end)):
                raise ValidationError("start/end must be finite", line=lineno)
            if start < 0 or end <= start:
                raise ValidationError(f"invalid interval [{start}, {end}]", line=lineno)
            grouped.setdefault(utt, []).append((PauseInterval(utt, start, end), lineno))

    result = {}
    for utt, items in grouped.items():
        items.sort(key=lambda it: (it[0].start, it[0].end))
        for (prev, _), (cur, lineno) in zip(items, items[1:]):
            if cur.start < prev.end:
                raise ValidationError(
                    f"interval [{cur.start}, {cur.end}] overlaps [{prev.start}, {prev.end}] "
                    f"in utterance {utt!r}",
                    line=lineno,
                )
        result[utt] = [it[0] for it in items]
    return result


def write_pause_file(path, pauses) -> None:
    """Write pause intervals (iterable or per-utterance mapping) as TSV."""
    if isinstance(pauses, dict):
        pauses = [p for utt in pauses for p in pauses[utt]]
    with open(path, "w", encoding="utf-8") as fh:
        for p in pauses:
            fh.write(f"{p.utterance_id}\t{p.start:.6f}\t{p.end:.6f}\n")


def validate_pauses(pauses: list[PauseInterval], duration: float) -> None:
    for p in pauses:
        if p.start < 0 or p.end > duration + 1e-9 or p.start >= p.end:
            raise ValidationError(
                f"pause [{p.start}, {p.end}] of {p.utterance_id!r} outside clip of {duration:.3f} s"
            )
