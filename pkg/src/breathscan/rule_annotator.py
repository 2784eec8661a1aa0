"""Threshold rules that sort forced-alignment pauses into breath / non-breath / unclassified.

Pauses are classified on the rule-pipeline frame clock (22.05 kHz) and their
frame sets are then projected onto the model-pipeline clock by frame centers.
"""

from __future__ import annotations

import enum
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .audio_io import AudioClip, PauseInterval, validate_pauses
from .errors import ConfigError, ValidationError
from .features import (
    MODEL_PIPELINE,
    RULE_PIPELINE,
    FeatureSequence,
    FrameConfig,
    extract_features,
    n_frames,
    na_vms,
    resampled_length,
)

log = logging.getLogger(__name__)

__all__ = [
    "PauseClass",
    "RuleThresholds",
    "PauseStats",
    "AnnotationResult",
    "frames_of_pause",
    "pause_stats",
    "classify_pause",
    "annotate_corpus",
    "calibrate_rules",
    "write_annotation_file",
    "read_annotation_file",
]


class PauseClass(enum.Enum):
    BREATH = "breath"
    NON_BREATH = "non-breath"
    UNCLASSIFIED = "unclassified"


@dataclass(frozen=True)
class RuleThresholds:
    min_breath_duration: float = 0.300
    breath_max_vms_gt: float = 150.0
    breath_max_zcr_gt: float = 1e-4
    breath_na_vms_gt: float = 0.6
    nonbreath_max_vms_lt: float = 150.0
    nonbreath_max_zcr_lt: float = 5e-5

    def __post_init__(self):
        values = asdict(self)
        for name, value in values.items():
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"threshold {name} must be a non-negative finite number")
        if not 0 < self.breath_na_vms_gt < 1:
            raise ConfigError("breath_na_vms_gt must lie in (0, 1)")
        # keeps the two rule sets mutually exclusive
        if not self.nonbreath_max_zcr_lt <= self.breath_max_zcr_gt:
            raise ConfigError("nonbreath_max_zcr_lt must not exceed breath_max_zcr_gt")


@dataclass(frozen=True)
class PauseStats:
    duration: float
    max_vms: float
    max_zcr: float
    na_vms: float
    n_frames: int


@dataclass
class AnnotationResult:
    breath: dict[str, np.ndarray]  # model-clock frame indices per utterance
    non_breath: dict[str, np.ndarray]
    pause_frames: dict[str, np.ndarray]
    n_model_frames: dict[str, int]
    classes: list[tuple[PauseInterval, PauseClass]]
    report: dict = field(default_factory=dict)


def frames_of_pause(pause: PauseInterval, cfg: FrameConfig, total: int | None = None) -> range:
    """Frames whose center lies in ``[start, end)``, optionally clipped to ``total`` frames."""
    sr, hop, half = cfg.sample_rate, cfg.hop_length, cfg.window_length / 2

    def center(t):
        return (t * hop + half) / sr

    lo = max(0, math.ceil((pause.start * sr - half) / hop))
    while lo > 0 and center(lo - 1) >= pause.start:
        lo -= 1
    while center(lo) < pause.start:
        lo += 1
    hi = max(lo, math.ceil((pause.end * sr - half) / hop))
    while hi > lo and center(hi - 1) >= pause.end:
        hi -= 1
    while center(hi) < pause.end:
        hi += 1
    if total is not None:
        hi = min(hi, total)
        lo = min(lo, hi)
    return range(lo, hi)


def pause_stats(features: FeatureSequence, pause: PauseInterval) -> PauseStats | None:
    """Feature summary over a pause, or ``None`` when no frame center falls inside."""
    if features.duration is not None:
        validate_pauses([pause], features.duration)
    frames = frames_of_pause(pause, features.frame_config, features.n_frames)
    if len(frames) == 0:
        return None
    sl = slice(frames.start, frames.stop)
    v = features.vms[sl]
    return PauseStats(
        duration=pause.duration,
        max_vms=float(v.max()),
        max_zcr=float(features.zcr[sl].max()),
        na_vms=na_vms(v),
        n_frames=len(frames),
    )


def _classify_stats(s: PauseStats | None, th: RuleThresholds) -> PauseClass:
    if s is None:
        return PauseClass.UNCLASSIFIED
    if (s.duration > th.min_breath_duration and s.max_vms > th.breath_max_vms_gt
            and s.max_zcr > th.breath_max_zcr_gt and s.na_vms > th.breath_na_vms_gt):
        return PauseClass.BREATH
    if s.max_vms < th.nonbreath_max_vms_lt and s.max_zcr < th.nonbreath_max_zcr_lt:
        return PauseClass.NON_BREATH
    return PauseClass.UNCLASSIFIED


def classify_pause(features: FeatureSequence, pause: PauseInterval,
                   th: RuleThresholds = RuleThresholds()) -> PauseClass:
    """Apply the breath and non-breath rule sets to one pause.

    A pause that covers no frame center is left unclassified.
    """
    return _classify_stats(pause_stats(features, pause), th)


def _frames_union(pauses, cfg, total) -> np.ndarray:
    idx = [np.arange(r.start, r.stop) for r in (frames_of_pause(p, cfg, total) for p in pauses)]
    if not idx:
        return np.zeros(0, dtype=np.int64)
    return np.unique(np.concatenate(idx)).astype(np.int64)


def _annotate_one(clip: AudioClip, pauses, th, rule_cfg, model_cfg):
    feats = extract_features(clip, rule_cfg)
    validate_pauses(pauses, clip.duration)
    stats = [pause_stats(feats, p) for p in pauses]
    classes = [_classify_stats(s, th) for s in stats]
    n_model = n_frames(resampled_length(clip.samples.size, clip.sample_rate, model_cfg.sample_rate),
                       model_cfg)
    return stats, classes, n_model


def _overlaps(p: PauseInterval, intervals) -> bool:
    return any(s < p.end and e > p.start for s, e in intervals)


def _ratio(num, den):
    return (num / den, False) if den else (1.0, True)


def annotate_corpus(clips, pauses: dict[str, list[PauseInterval]],
                    th: RuleThresholds = RuleThresholds(),
                    rule_cfg: FrameConfig = RULE_PIPELINE,
                    model_cfg: FrameConfig = MODEL_PIPELINE,
                    gold: dict[str, list[tuple[float, float]]] | None = None,
                    jobs: int = 1) -> AnnotationResult:
    """Classify every pause of every clip and collect model-clock frame sets.

    ``clips`` is an iterable of :class:`AudioClip` (keyed by ``utterance_id``).
    ``gold`` optionally maps utterances to manually annotated breath spans, in
    which case the report carries per-pause and per-frame precision/recall.
    Failing utterances are logged, skipped and counted.
    """
    clips = list(clips)

    def work(clip):
        try:
            return _annotate_one(clip, pauses.get(clip.utterance_id, []), th, rule_cfg, model_cfg)
        except Exception as exc:  # one bad utterance must not abort the corpus
            log.warning("skipping %s: %s", clip.utterance_id, exc)
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            outcomes = list(ex.map(work, clips))
    else:
        outcomes = [work(c) for c in clips]

    B, U, P, sizes, classes = {}, {}, {}, {}, []
    counts = {c.value: 0 for c in PauseClass}
    failed = []
    stats_all = []
    for clip, out in zip(clips, outcomes):
        utt = clip.utterance_id
        if isinstance(out, Exception):
            failed.append(utt)
            continue
        stats, cls, n_model = out
        upauses = pauses.get(utt, [])
        sizes[utt] = n_model
        P[utt] = _frames_union(upauses, model_cfg, n_model)
        B[utt] = _frames_union([p for p, c in zip(upauses, cls) if c is PauseClass.BREATH],
                               model_cfg, n_model)
        U[utt] = _frames_union([p for p, c in zip(upauses, cls) if c is PauseClass.NON_BREATH],
                               model_cfg, n_model)
        for p, c, s in zip(upauses, cls, stats):
            counts[c.value] += 1
            classes.append((p, c))
            stats_all.append((p, s))

    report = {
        "utterances": len(clips),
        "failed": len(failed),
        "failed_ids": failed,
        "pauses": len(classes),
        "counts": counts,
        "breath_frames": int(sum(len(v) for v in B.values())),
        "non_breath_frames": int(sum(len(v) for v in U.values())),
        "pause_frames": int(sum(len(v) for v in P.values())),
    }
    if gold is not None:
        report["gold"] = _gold_report(classes, gold, P, B, U, sizes, model_cfg)
    return AnnotationResult(B, U, P, sizes, classes, report)


def _gold_report(classes, gold, P, B, U, sizes, model_cfg):
    tp_b = fp_b = fn_b = tp_u = fp_u = fn_u = 0
    for p, c in classes:
        is_breath = _overlaps(p, gold.get(p.utterance_id, []))
        if c is PauseClass.BREATH:
            tp_b += is_breath
            fp_b += not is_breath
        elif is_breath:
            fn_b += 1
        if c is PauseClass.NON_BREATH:
            tp_u += not is_breath
            fp_u += is_breath
        elif not is_breath:
            fn_u += 1

    ftp_b = ffp_b = ffn_b = ftp_u = ffp_u = ffn_u = 0
    for utt, pf in P.items():
        gold_frames = _frames_union(
            [PauseInterval(utt, s, e) for s, e in gold.get(utt, [])], model_cfg, sizes[utt])
        g = np.isin(pf, gold_frames)
        b = np.isin(pf, B[utt])
        u = np.isin(pf, U[utt])
        ftp_b += int(np.sum(b & g)); ffp_b += int(np.sum(b & ~g)); ffn_b += int(np.sum(~b & g))
        ftp_u += int(np.sum(u & ~g)); ffp_u += int(np.sum(u & g)); ffn_u += int(np.sum(~u & ~g))

    def block(tp, fp, fn):
        prec, pflag = _ratio(tp, tp + fp)
        rec, rflag = _ratio(tp, tp + fn)
        return {"tp": tp, "fp": fp, "fn": fn, "precision": prec, "recall": rec,
                "precision_undefined": pflag, "recall_undefined": rflag}

    return {
        "per_pause": {"breath": block(tp_b, fp_b, fn_b), "non_breath": block(tp_u, fp_u, fn_u)},
        "per_frame": {"breath": block(ftp_b, ffp_b, ffn_b),
                      "non_breath": block(ftp_u, ffp_u, ffn_u)},
    }


def calibrate_rules(stats: list[PauseStats | None], is_breath, target_precision: float = 0.98,
                    base: RuleThresholds = RuleThresholds(), n_grid: int = 8) -> RuleThresholds:
    """Grid-search the breath thresholds for maximal recall at ``target_precision``.

    Candidate values per threshold come from quantiles of the labeled pause
    statistics plus the current value. Non-breath thresholds are kept.
    Returns ``base`` unchanged when no grid point reaches the target.
    """
    keep = [i for i, s in enumerate(stats) if s is not None]
    if not keep:
        raise ConfigError("no classifiable pauses to calibrate on")
    gold = np.asarray(is_breath, dtype=bool)[keep]
    arr = {k: np.array([getattr(stats[i], k) for i in keep]) for k in
           ("duration", "max_vms", "max_zcr", "na_vms")}
    q = np.linspace(0, 1, n_grid)

    def grid(values, current, lo=None, hi=None):
        g = np.unique(np.concatenate([np.quantile(values, q), [current]]))
        if lo is not None:
            g = g[g > lo]
        if hi is not None:
            g = g[g < hi]
        return g

    best, best_recall = base, -1.0
    n_pos = max(int(gold.sum()), 1)
    for d, v, z, a in itertools.product(
        grid(arr["duration"], base.min_breath_duration),
        grid(arr["max_vms"], base.breath_max_vms_gt),
        grid(arr["max_zcr"], base.breath_max_zcr_gt, lo=base.nonbreath_max_zcr_lt),
        grid(arr["na_vms"], base.breath_na_vms_gt, lo=0.0, hi=1.0),
    ):
        pred = (arr["duration"] > d) & (arr["max_vms"] > v) & (arr["max_zcr"] > z) & (arr["na_vms"] > a)
        n = int(pred.sum())
        if n == 0:
            continue
        prec = float((pred & gold).sum()) / n
        rec = float((pred & gold).sum()) / n_pos
        if prec >= target_precision and rec > best_recall:
            best_recall = rec
            best = RuleThresholds(float(d), float(v), float(z), float(a),
                                  base.nonbreath_max_vms_lt, base.nonbreath_max_zcr_lt)
    return best


def write_annotation_file(path, classes) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p, c in classes:
            fh.write(f"{p.utterance_id}\t{p.start:.6f}\t{p.end:.6f}\t{c.value}\n")


def read_annotation_file(path) -> dict[str, list[tuple[PauseInterval, PauseClass]]]:
    """Read ``utterance_id<TAB>start<TAB>end<TAB>class`` lines."""
    out: dict[str, list] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.rstrip("\r\n")
            if not text.strip() or text.startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 4:
                raise ValidationError("expected 4 tab-separated fields", line=lineno)
            try:
                p = PauseInterval(parts[0], float(parts[1]), float(parts[2]))
                c = PauseClass(parts[3].strip())
            except ValueError as exc:
                raise ValidationError(str(exc), line=lineno) from None
            if p.end <= p.start:
                raise ValidationError(f"invalid interval [{p.start}, {p.end}]", line=lineno)
            out.setdefault(p.utterance_id, []).append((p, c))
    return out


def gold_breath_spans(path) -> dict[str, list[tuple[float, float]]]:
    """Breath spans from an annotation file (other classes are ignored)."""
    return {utt: [(p.start, p.end) for p, c in items if c is PauseClass.BREATH]
            for utt, items in read_annotation_file(path).items()}
