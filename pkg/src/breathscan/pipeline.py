"""Glue between audio, rule annotation and the self-training data structures."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .audio_io import AudioClip, PauseInterval
from .features import MODEL_PIPELINE, FrameConfig, extract_features
from .labeling import FrameSets, LabelSequence
from .rule_annotator import AnnotationResult, PauseClass, _frames_union
from .self_training import TrainingUtterance, ValidationUtterance

__all__ = ["withhold_pause_labels", "training_set", "validation_set", "intervals_from_probs"]


def withhold_pause_labels(result: AnnotationResult, fraction: float, seed: int = 0,
                          model_cfg: FrameConfig = MODEL_PIPELINE) -> AnnotationResult:
    """Turn a random ``fraction`` of the classified pauses back into unclassified ones."""
    rng = np.random.default_rng(seed)
    labeled = [i for i, (_, c) in enumerate(result.classes) if c is not PauseClass.UNCLASSIFIED]
    drop = set(rng.choice(labeled, size=int(round(fraction * len(labeled))), replace=False).tolist()) \
        if labeled else set()
    classes = [(p, PauseClass.UNCLASSIFIED if i in drop else c) for i, (p, c) in enumerate(result.classes)]
    B, U = {}, {}
    for utt, n in result.n_model_frames.items():
        mine = [(p, c) for p, c in classes if p.utterance_id == utt]
        B[utt] = _frames_union([p for p, c in mine if c is PauseClass.BREATH], model_cfg, n)
        U[utt] = _frames_union([p for p, c in mine if c is PauseClass.NON_BREATH], model_cfg, n)
    report = dict(result.report, withheld=len(drop))
    return replace(result, breath=B, non_breath=U, classes=classes, report=report)


def training_set(clips, annotation: AnnotationResult,
                 model_cfg: FrameConfig = MODEL_PIPELINE) -> list[TrainingUtterance]:
    """Model-pipeline features paired with the annotated frame sets (failed utterances skipped)."""
    out = []
    for clip in clips:
        utt = clip.utterance_id
        if utt not in annotation.n_model_frames:
            continue
        feats = extract_features(clip, model_cfg)
        n = feats.n_frames
        if n != annotation.n_model_frames[utt]:
            raise ValueError(f"{utt}: frame count mismatch ({n} vs {annotation.n_model_frames[utt]})")
        sets = FrameSets(n, annotation.pause_frames[utt], annotation.breath[utt], annotation.non_breath[utt])
        out.append(TrainingUtterance(feats, sets))
    return out


def validation_set(clips, pauses: dict[str, list[PauseInterval]],
                   gold: dict[str, list[tuple[float, float]]],
                   model_cfg: FrameConfig = MODEL_PIPELINE) -> list[ValidationUtterance]:
    """Features, pause frames and gold breath labels (1 inside gold breath spans, else 0)."""
    out = []
    for clip in clips:
        utt = clip.utterance_id
        feats = extract_features(clip, model_cfg)
        n = feats.n_frames
        pf = _frames_union(pauses.get(utt, []), model_cfg, n)
        gf = _frames_union([PauseInterval(utt, s, e) for s, e in gold.get(utt, [])], model_cfg, n)
        labels = np.zeros(n, dtype=np.int8)
        labels[gf] = 1
        out.append(ValidationUtterance(feats, pf, LabelSequence(labels, utt)))
    return out


def intervals_from_probs(probs, threshold: float, hop_seconds: float, min_duration: float = 0.0):
    """Merge consecutive frames with ``p >= threshold`` into ``(start, end)`` second spans.

    Frame ``i`` covers ``[i * hop, (i + 1) * hop)``. Spans shorter than
    ``min_duration`` are dropped.
    """
    above = np.asarray(probs) >= threshold
    edges = np.diff(np.concatenate([[0], above.astype(np.int8), [0]]))
    starts = np.flatnonzero(edges == 1)
    ends = np.flatnonzero(edges == -1)
    out = []
    for s, e in zip(starts, ends):
        if (e - s) * hop_seconds + 1e-9 >= min_duration:
            out.append((s * hop_seconds, e * hop_seconds))
    return out
