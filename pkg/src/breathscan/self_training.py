"""Iterative self-training with precision-calibrated pseudo-labels.

Each iteration calibrates breath / non-breath probability thresholds on the
validation pauses so that each pseudo-label class reaches a target precision,
pseudo-labels the masked pause frames of the training set, and continues
training the previous detector. The loop stops at the first strict drop of
validation IoU and returns the detector from before the drop.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ValidationError
from .evaluation import sweep_threshold, write_metrics_json
from .features import FeatureSequence
from .labeling import FrameSets, LabelSequence, labels_from_sets, merge_pseudo
from .nn.checkpoint import save_checkpoint
from .nn.model import Detector, DetectorConfig
from .nn.training import TrainConfig, train_epochs

log = logging.getLogger(__name__)

__all__ = [
    "TrainingUtterance",
    "ValidationUtterance",
    "SelfTrainConfig",
    "SelfTrainState",
    "SelfTrainResult",
    "calibrate_from_probs",
    "calibrate_thresholds",
    "pseudo_label",
    "run_self_training",
]


@dataclass
class TrainingUtterance:
    features: FeatureSequence
    sets: FrameSets

    @property
    def utterance_id(self):
        return self.features.utterance_id


@dataclass
class ValidationUtterance:
    features: FeatureSequence
    pause: np.ndarray  # frame indices inside pauses
    gold: LabelSequence  # 1 on gold breath frames, 0 elsewhere

    @property
    def utterance_id(self):
        return self.features.utterance_id


@dataclass(frozen=True)
class SelfTrainConfig:
    initial_target: float = 0.98
    target_decrement: float = 0.02
    target_floor: float = 0.80
    max_iterations: int = 4
    train: TrainConfig = TrainConfig()
    seed: int = 0
    use_pseudo_labels: bool = True
    use_non_breath: bool = True
    accumulate_pseudo: bool = False

    def target_at(self, k: int) -> float:
        return max(self.target_floor, self.initial_target - self.target_decrement * (k - 1))


@dataclass
class SelfTrainState:
    k: int
    model: Detector
    sets: dict[str, FrameSets]
    alpha: float | None = None
    beta: float | None = None
    target_precision: float | None = None


@dataclass
class SelfTrainResult:
    model: Detector
    output_iteration: int
    history: list[dict]
    warnings: list[str] = field(default_factory=list)


def calibrate_from_probs(probs, is_breath, target: float) -> tuple[float, float]:
    """Dynamic thresholds from validation pause-frame probabilities.

    ``alpha`` is the smallest candidate ``t`` for which frames with
    ``p >= t`` reach breath precision ``target``; ``beta`` the largest ``t``
    for which frames with ``p <= t`` reach non-breath precision ``target``.
    Candidates are the unique probabilities. Unattainable targets give
    ``alpha = inf`` / ``beta = -inf``; ``beta < alpha`` always holds.
    """
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(is_breath, dtype=bool).ravel()
    if p.size == 0:
        raise ConfigError("validation set has no pause frames to calibrate on")
    cands, inv = np.unique(p, return_inverse=True)
    pos_per = np.bincount(inv, weights=y, minlength=cands.size)
    all_per = np.bincount(inv, minlength=cands.size).astype(np.float64)
    # frames with p >= cands[i]
    above_pos = np.cumsum(pos_per[::-1])[::-1]
    above_all = np.cumsum(all_per[::-1])[::-1]
    # frames with p <= cands[i]
    below_neg = np.cumsum(all_per - pos_per)
    below_all = np.cumsum(all_per)
    ok_a = above_pos / above_all >= target
    ok_b = below_neg / below_all >= target
    alpha = float(cands[np.flatnonzero(ok_a)[0]]) if ok_a.any() else math.inf
    ok_b &= cands < alpha
    beta = float(cands[np.flatnonzero(ok_b)[-1]]) if ok_b.any() else -math.inf
    return alpha, beta


def _validation_pause_probs(model: Detector, validation):
    probs = model.predict([v.features for v in validation])
    p = np.concatenate([pr[v.pause] for pr, v in zip(probs, validation)]) if validation else np.zeros(0)
    y = np.concatenate([v.gold.labels[v.pause] == 1 for v in validation]) if validation else np.zeros(0, bool)
    return probs, p, y


def calibrate_thresholds(model: Detector, validation, target_precision: float) -> tuple[float, float]:
    if not validation:
        raise ConfigError("empty validation set")
    _, p, y = _validation_pause_probs(model, validation)
    return calibrate_from_probs(p, y, target_precision)


def pseudo_label(probs, sets: FrameSets, alpha: float, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Frames of ``P \\ (B u U)`` with ``p > alpha`` (breath) and ``p < beta`` (non-breath)."""
    probs = np.asarray(probs)
    if probs.size != sets.n_frames:
        raise ValidationError(f"{probs.size} probabilities for {sets.n_frames} frames")
    eligible = np.setdiff1d(sets.pause, np.union1d(sets.breath, sets.non_breath))
    pe = probs[eligible]
    return eligible[pe > alpha], eligible[pe < beta]


def _evaluate(model: Detector, validation):
    probs, _, _ = _validation_pause_probs(model, validation)
    t, m = sweep_threshold(probs, [v.gold for v in validation])
    return m


def _count(sets: dict[str, FrameSets]):
    return (int(sum(s.breath.size for s in sets.values())),
            int(sum(s.non_breath.size for s in sets.values())))


def _runs(idx):
    idx = np.asarray(idx)
    if idx.size == 0:
        return []
    breaks = np.flatnonzero(np.diff(idx) != 1)
    starts = np.concatenate([[0], breaks + 1])
    ends = np.concatenate([breaks, [idx.size - 1]])
    return [(int(idx[s]), int(idx[e]) + 1) for s, e in zip(starts, ends)]


def _write_sets(path, sets: dict[str, FrameSets], pseudo: dict[str, tuple] | None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# utterance_id\tset\tstart_frame\tend_frame\n")
        for utt in sorted(sets):
            s = sets[utt]
            rows = [("breath", s.breath), ("non-breath", s.non_breath)]
            if pseudo and utt in pseudo:
                rows += [("pseudo-breath", pseudo[utt][0]), ("pseudo-non-breath", pseudo[utt][1])]
            for name, idx in rows:
                for a, b in _runs(idx):
                    fh.write(f"{utt}\t{name}\t{a}\t{b}\n")


def _snapshot(run_dir, k, model, metrics, thresholds, sets, pseudo):
    d = Path(run_dir) / f"iter_{k}"
    d.mkdir(parents=True, exist_ok=True)
    digest = save_checkpoint(model, d / "checkpoint.bsck")
    with open(d / "thresholds.json", "w", encoding="utf-8") as fh:
        json.dump({name: _json_float(v) for name, v in thresholds.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_sets(d / "sets.tsv", sets, pseudo)
    write_metrics_json(d / "metrics.json", metrics, iteration=k)
    return digest


def _json_float(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return None if v is None else ("inf" if v > 0 else "-inf")
    return v


def run_self_training(corpus: list[TrainingUtterance], validation: list[ValidationUtterance],
                      cfg: SelfTrainConfig = SelfTrainConfig(),
                      detector_cfg: DetectorConfig = DetectorConfig(),
                      run_dir=None, model: Detector | None = None) -> SelfTrainResult:
    """Run the self-training loop and return the best detector with per-iteration history.

    ``history[k]`` holds validation IoU/precision/recall at the IoU-maximizing
    threshold, the thresholds and targets used, set sizes and the parameter
    fingerprints before and after training (a warm-start chain).
    """
    if not validation:
        raise ConfigError("self-training needs a validation set")
    base = {u.utterance_id: u.sets.copy() for u in corpus}
    if not cfg.use_non_breath:
        for s in base.values():
            s.non_breath = np.zeros(0, dtype=np.int64)
    if sum(s.breath.size for s in base.values()) == 0:
        raise ConfigError("rule annotation produced no breath frames; calibrate the rule thresholds first")

    feats = {u.utterance_id: u.features for u in corpus}
    ids = [u.utterance_id for u in corpus]
    if model is None:
        model = Detector(detector_cfg, seed=cfg.seed)
        model.fit_normalization(feats.values())

    def dataset(sets):
        return [(feats[i], labels_from_sets(sets[i], i)) for i in ids]

    history, warnings = [], []
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    def record(k, model, start_fp, sets, alpha, beta, target, n_pseudo, conflicts, pseudo):
        m = _evaluate(model, validation)
        nb, nu = _count(sets)
        entry = {
            "iteration": k,
            "iou": m.iou, "precision": m.precision, "recall": m.recall, "threshold": m.threshold,
            "alpha": _json_float(alpha), "beta": _json_float(beta), "target_precision": target,
            "breath_frames": nb, "non_breath_frames": nu,
            "pseudo_breath_frames": n_pseudo[0], "pseudo_non_breath_frames": n_pseudo[1],
            "conflicts": conflicts,
            "params_start": start_fp, "params_end": model.fingerprint(),
            "selection_metric": "validation_iou",
        }
        if run_dir is not None:
            entry["checkpoint_sha256"] = _snapshot(
                run_dir, k, model, m, {"alpha": alpha, "beta": beta, "target_precision": target},
                sets, pseudo)
        history.append(entry)
        log.info("iteration %d: IoU %.4f P %.4f R %.4f", k, m.iou, m.precision, m.recall)
        return m.iou

    start = model.fingerprint()
    train_epochs(model, dataset(base), cfg.train, seed=cfg.seed)
    prev_iou = record(0, model, start, base, None, None, None, (0, 0), 0, None)
    prev_model = model.copy()
    output = 0
    current_sets = base

    for k in range(1, cfg.max_iterations + 1):
        target = cfg.target_at(k)
        alpha = beta = None
        pseudo = {}
        n_hb = n_hu = conflicts = 0
        anchor = current_sets if cfg.accumulate_pseudo else base
        if cfg.use_pseudo_labels:
            alpha, beta = calibrate_thresholds(prev_model, validation, target)
            probs = prev_model.predict([feats[i] for i in ids])
            new_sets = {}
            for i, p in zip(ids, probs):
                hb, hu = pseudo_label(p, anchor[i], alpha, beta)
                new_sets[i], c = merge_pseudo(anchor[i], hb, hu)
                pseudo[i] = (hb, hu)
                n_hb += hb.size
                n_hu += hu.size
                conflicts += c
            if n_hb == 0 and n_hu == 0:
                msg = f"iteration {k}: no pseudo-labels at target precision {target:.2f}"
                warnings.append(msg)
                log.warning(msg)
        else:
            new_sets = {i: s.copy() for i, s in anchor.items()}
        current_sets = new_sets

        model = prev_model.copy()
        start = model.fingerprint()
        train_epochs(model, dataset(current_sets), cfg.train, seed=cfg.seed + k)
        iou = record(k, model, start, current_sets, alpha, beta, target, (n_hb, n_hu), conflicts, pseudo)
        if iou < prev_iou:
            break
        prev_iou, prev_model, output = iou, model.copy(), k

    if run_dir is not None:
        with open(run_dir / "history.jsonl", "w", encoding="utf-8") as fh:
            for entry in history:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
        (run_dir / "output_iteration.txt").write_text(f"{output}\n")
    return SelfTrainResult(prev_model, output, history, warnings)
