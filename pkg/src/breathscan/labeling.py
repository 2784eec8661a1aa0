"""Per-frame training targets with a loss-mask sentinel.

Frames outside pauses and frames in the non-breath set are 0, frames in the
breath set are 1, and the remaining pause frames are masked out of the loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, FormatError, ValidationError

__all__ = [
    "MASK",
    "SERIALIZED_MASK",
    "LabelSequence",
    "FrameSets",
    "build_labels",
    "merge_pseudo",
    "write_label_tsv",
    "read_label_tsv",
    "write_label_dump",
    "read_label_dump",
]

MASK = -1  # in-memory sentinel
SERIALIZED_MASK = -100  # value written to label files

LABEL_MAGIC = b"BSLB"
LABEL_VERSION = 1


@dataclass
class LabelSequence:
    labels: np.ndarray  # int8, values in {0, 1, MASK}
    utterance_id: str = ""

    @property
    def mask(self) -> np.ndarray:
        """True where the frame contributes to the loss."""
        return self.labels != MASK

    def __len__(self):
        return self.labels.size


@dataclass
class FrameSets:
    """Pause, breath and non-breath frame indices of one utterance."""

    n_frames: int
    pause: np.ndarray
    breath: np.ndarray
    non_breath: np.ndarray

    def copy(self) -> "FrameSets":
        return FrameSets(self.n_frames, self.pause.copy(), self.breath.copy(), self.non_breath.copy())


def _as_index(values, F, name):
    idx = np.unique(np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                               dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] >= F):
        raise ValidationError(f"{name} frame index out of range for {F} frames")
    return idx


def build_labels(F: int, P, B, U, utterance_id: str = "") -> LabelSequence:
    """Materialize labels for ``F`` frames from pause/breath/non-breath index sets."""
    if F < 0:
        raise ValidationError("frame count must be non-negative")
    P, B, U = _as_index(P, F, "pause"), _as_index(B, F, "breath"), _as_index(U, F, "non-breath")
    if np.intersect1d(B, U).size:
        raise ConsistencyError("breath and non-breath sets overlap")
    if np.setdiff1d(B, P).size or np.setdiff1d(U, P).size:
        raise ConsistencyError("breath and non-breath sets must lie inside pauses")
    labels = np.zeros(F, dtype=np.int8)
    labels[P] = MASK
    labels[U] = 0
    labels[B] = 1
    return LabelSequence(labels, utterance_id)


def merge_pseudo(base: FrameSets, pseudo_breath, pseudo_non_breath) -> tuple[FrameSets, int]:
    """Union pseudo-labels into the rule-based sets.

    Rule labels win: pseudo-labels landing on frames already in ``B`` or ``U``
    are ignored. A frame proposed for both classes stays masked. Returns the
    merged sets and the number of such conflicting frames.
    """
    hb = np.unique(np.asarray(pseudo_breath, dtype=np.int64))
    hu = np.unique(np.asarray(pseudo_non_breath, dtype=np.int64))
    conflicts = np.intersect1d(hb, hu)
    ruled = np.union1d(base.breath, base.non_breath)
    eligible = np.setdiff1d(base.pause, ruled)
    hb = np.intersect1d(np.setdiff1d(hb, conflicts), eligible)
    hu = np.intersect1d(np.setdiff1d(hu, conflicts), eligible)
    merged = FrameSets(base.n_frames, base.pause.copy(),
                       np.union1d(base.breath, hb), np.union1d(base.non_breath, hu))
    return merged, int(np.intersect1d(conflicts, eligible).size)


def labels_from_sets(sets: FrameSets, utterance_id: str = "") -> LabelSequence:
    return build_labels(sets.n_frames, sets.pause, sets.breath, sets.non_breath, utterance_id)


def write_label_tsv(path, sequences) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            out = np.where(seq.labels == MASK, SERIALIZED_MASK, seq.labels)
            for i, v in enumerate(out):
                fh.write(f"{seq.utterance_id}\t{i}\t{int(v)}\n")


def read_label_tsv(path) -> dict[str, LabelSequence]:
    rows: dict[str, dict[int, int]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 3:
                raise ValidationError("expected 3 tab-separated fields", line=lineno)
            utt, i, v = parts[0], int(parts[1]), int(parts[2])
            if v not in (0, 1, SERIALIZED_MASK):
                raise ValidationError(f"label must be 0, 1 or {SERIALIZED_MASK}", line=lineno)
            rows.setdefault(utt, {})[i] = v
    out = {}
    for utt, d in rows.items():
        F = max(d) + 1
        if len(d) != F:
            raise ValidationError(f"utterance {utt!r} has missing frame indices")
        arr = np.array([d[i] for i in range(F)], dtype=np.int16)
        out[utt] = LabelSequence(np.where(arr == SERIALIZED_MASK, MASK, arr).astype(np.int8), utt)
    return out


def write_label_dump(path, seq: LabelSequence) -> None:
    out = np.where(seq.labels == MASK, SERIALIZED_MASK, seq.labels).astype("<i2")
    with open(path, "wb") as fh:
        fh.write(LABEL_MAGIC + struct.pack("<III", LABEL_VERSION, out.size, 0))
        fh.write(out.tobytes())


def read_label_dump(path) -> LabelSequence:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != LABEL_MAGIC:
        raise FormatError(f"{path}: not a label dump")
    version, F, _ = struct.unpack("<III", data[4:16])
    if version != LABEL_VERSION or len(data) != 16 + 2 * F:
        raise FormatError(f"{path}: corrupt label dump")
    arr = np.frombuffer(data, dtype="<i2", offset=16)
    return LabelSequence(np.where(arr == SERIALIZED_MASK, MASK, arr).astype(np.int8), Path(path).stem)
