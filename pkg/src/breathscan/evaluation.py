"""Frame-wise IoU, precision and recall with an IoU-maximizing threshold sweep.

A frame is predicted positive when its probability is ``>= threshold``.
Frames whose gold label is MASK are ignored. Counts are pooled over the whole
corpus (micro-average) unless ``average="macro"``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ValidationError
from .labeling import MASK

__all__ = ["DetectionMetrics", "confusion", "metrics_at", "sweep_threshold", "write_metrics_json",
           "write_per_utterance_csv"]


@dataclass
class DetectionMetrics:
    iou: float
    precision: float
    recall: float
    threshold: float
    tp: int
    fp: int
    fn: int
    tn: int
    iou_undefined: bool = False
    precision_undefined: bool = False
    recall_undefined: bool = False

    @classmethod
    def from_counts(cls, tp, fp, fn, tn, threshold):
        def ratio(num, den):
            return (float(num / den), False) if den else (1.0, True)

        iou, fi = ratio(tp, tp + fp + fn)
        prec, fp_ = ratio(tp, tp + fp)
        rec, fr = ratio(tp, tp + fn)
        return cls(iou, prec, rec, float(threshold), int(tp), int(fp), int(fn), int(tn), fi, fp_, fr)

    def to_dict(self):
        return asdict(self)


def _pairs(preds, gold):
    if isinstance(preds, dict):
        keys = sorted(preds)
        missing = [k for k in keys if k not in gold]
        if missing:
            raise ValidationError(f"no gold labels for utterance {missing[0]!r}")
        items = [(k, preds[k], gold[k]) for k in keys]
    else:
        preds, gold = list(preds), list(gold)
        if len(preds) != len(gold):
            raise ValidationError("prediction and gold lists differ in length")
        items = [(getattr(g, "utterance_id", str(i)) or str(i), p, g)
                 for i, (p, g) in enumerate(zip(preds, gold))]
    out = []
    for utt, p, g in items:
        p = np.asarray(getattr(p, "probs", p), dtype=np.float64)
        g = np.asarray(getattr(g, "labels", g))
        if p.shape != g.shape:
            raise ValidationError(f"utterance {utt!r}: {p.size} predictions vs {g.size} gold labels")
        valid = g != MASK
        out.append((utt, p[valid], g[valid] == 1))
    return out


def confusion(probs, positive, threshold):
    pred = probs >= threshold
    tp = int(np.sum(pred & positive))
    fp = int(np.sum(pred & ~positive))
    fn = int(np.sum(~pred & positive))
    tn = int(np.sum(~pred & ~positive))
    return tp, fp, fn, tn


def metrics_at(preds, gold, threshold: float, average: str = "micro") -> DetectionMetrics:
    """Metrics at a fixed threshold.

    ``preds`` and ``gold`` are parallel sequences (or dicts keyed by
    utterance) of probability vectors and label vectors / LabelSequences.
    """
    pairs = _pairs(preds, gold)
    if average == "micro":
        if not pairs:
            return DetectionMetrics.from_counts(0, 0, 0, 0, threshold)
        p = np.concatenate([x[1] for x in pairs])
        g = np.concatenate([x[2] for x in pairs])
        return DetectionMetrics.from_counts(*confusion(p, g, threshold), threshold)
    if average != "macro":
        raise ValueError(f"unknown average {average!r}")
    per = [DetectionMetrics.from_counts(*confusion(p, g, threshold), threshold) for _, p, g in pairs]
    tot = np.sum([[m.tp, m.fp, m.fn, m.tn] for m in per], axis=0) if per else np.zeros(4, int)
    out = DetectionMetrics.from_counts(*tot, threshold)
    if per:
        out.iou = float(np.mean([m.iou for m in per]))
        out.precision = float(np.mean([m.precision for m in per]))
        out.recall = float(np.mean([m.recall for m in per]))
    return out


def sweep_threshold(preds, gold) -> tuple[float, DetectionMetrics]:
    """IoU-maximizing threshold over the unique predicted probabilities plus 0.5.

    Ties go to the larger threshold.
    """
    pairs = _pairs(preds, gold)
    p = np.concatenate([x[1] for x in pairs]) if pairs else np.zeros(0)
    g = np.concatenate([x[2] for x in pairs]) if pairs else np.zeros(0, bool)
    cands = np.unique(np.concatenate([p, [0.5]]))  # ascending
    order = np.argsort(-p, kind="stable")
    ps, gs = p[order], g[order]
    ctp = np.concatenate([[0], np.cumsum(gs)])
    cfp = np.concatenate([[0], np.cumsum(~gs)])
    # number of frames with p >= t, for each candidate t
    n_pos = np.searchsorted(-ps, -cands, side="right")
    tp = ctp[n_pos]
    fp = cfp[n_pos]
    P = int(g.sum())
    fn = P - tp
    den = tp + fp + fn
    iou = np.where(den > 0, tp / np.maximum(den, 1), 1.0)
    best = np.flatnonzero(iou == iou.max())[-1]
    t = float(cands[best])
    return t, DetectionMetrics.from_counts(tp[best], fp[best], fn[best], len(p) - tp[best] - fp[best] - fn[best], t)


def write_metrics_json(path, metrics: DetectionMetrics, **meta) -> None:
    payload = {"metrics": metrics.to_dict(), "averaging": meta.pop("averaging", "micro"),
               "iou_definition": "frame-wise TP/(TP+FP+FN)", **meta}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_per_utterance_csv(path, preds, gold, threshold) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["utterance_id", "tp", "fp", "fn", "tn", "iou", "precision", "recall"])
        for utt, p, g in _pairs(preds, gold):
            m = DetectionMetrics.from_counts(*confusion(p, g, threshold), threshold)
            w.writerow([utt, m.tp, m.fp, m.fn, m.tn, f"{m.iou:.6f}", f"{m.precision:.6f}",
                        f"{m.recall:.6f}"])
