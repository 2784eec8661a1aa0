"""Synthetic speech-with-pauses corpora with exact breath ground truth.

Speech is a harmonic complex with syllable envelopes and occasional fricative
noise bursts. Pauses are digital silence that may hold a breath (band-limited
noise with a smooth envelope) or a tongue click (a few milliseconds of damped
oscillation). Pause intervals sit a guard distance inside each acoustic gap,
as a forced aligner's pause spans would.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import AudioClip, PauseInterval, write_pause_file, write_wav
from .rule_annotator import PauseClass, write_annotation_file

__all__ = [
    "SyntheticUtterance",
    "breath_noise",
    "click",
    "speech",
    "generate_utterance",
    "generate_corpus",
    "constructed_rule_corpus",
    "write_corpus",
    "write_selftrain_experiment",
]

SR = 22050
GUARD = 0.012  # seconds of silence between speech and the annotated pause span


@dataclass
class SyntheticUtterance:
    clip: AudioClip
    pauses: list[PauseInterval]
    kinds: list[str]  # "breath" | "silence" | "click"
    breath_spans: list[tuple[float, float]] = field(default_factory=list)

    @property
    def utterance_id(self):
        return self.clip.utterance_id


def _band_noise(rng, n, sr, lo, hi):
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(f < lo) | (f > hi)] = 0
    x = np.fft.irfft(spec, n)
    return x / (np.sqrt(np.mean(x * x)) + 1e-12)


def _envelope(n, attack=0.3, release=0.4):
    env = np.ones(n)
    a, r = max(1, int(attack * n)), max(1, int(release * n))
    env[:a] = 0.5 - 0.5 * np.cos(np.pi * np.arange(a) / a)
    env[n - r:] = 0.5 + 0.5 * np.cos(np.pi * np.arange(r) / r)
    return env


def breath_noise(rng, n, sr=SR, amplitude=0.05, band=(300.0, 4000.0)):
    """Inhalation-like noise: band-limited Gaussian noise under a smooth envelope."""
    return amplitude * _band_noise(rng, n, sr, *band) * _envelope(n)


def click(rng, sr=SR, amplitude=0.3, duration=0.004):
    n = max(4, int(duration * sr))
    t = np.arange(n) / sr
    f = rng.uniform(2000, 4000)
    return amplitude * np.sin(2 * np.pi * f * t) * np.exp(-t / (duration / 4))


def speech(rng, n, sr=SR, amplitude=0.3):
    """Voiced harmonic complex with syllable envelopes and fricative bursts."""
    t = np.arange(n) / sr
    f0 = rng.uniform(90, 220) * (1 + 0.05 * np.sin(2 * np.pi * rng.uniform(2, 5) * t))
    phase = 2 * np.pi * np.cumsum(f0) / sr
    x = np.zeros(n)
    for k in range(1, int(4000 / 220) + 1):
        x += np.sin(k * phase) / k
    syll = int(rng.uniform(0.12, 0.2) * sr)
    env = 0.6 + 0.4 * np.abs(np.sin(np.pi * np.arange(n) / syll))
    x *= env / (np.sqrt(np.mean(x * x)) + 1e-12)
    # fricatives: high-band noise bursts
    for _ in range(rng.integers(0, 3)):
        m = int(rng.uniform(0.04, 0.1) * sr)
        if m >= n:
            break
        s = rng.integers(0, n - m)
        x[s:s + m] += 0.8 * _band_noise(rng, m, sr, 3500, min(7500, sr / 2 - 1)) * _envelope(m, 0.2, 0.2)
    x *= amplitude / (np.abs(x).max() + 1e-12)
    fade = min(int(0.01 * sr), n // 2)
    if fade:
        ramp = np.linspace(0, 1, fade)
        x[:fade] *= ramp
        x[n - fade:] *= ramp[::-1]
    return x


def generate_utterance(rng, utterance_id, n_pauses=3, sr=SR, kind_probs=(0.5, 0.3, 0.2),
                       breath_duration=(0.15, 0.6), breath_amplitude=(0.01, 0.08),
                       silence_duration=(0.1, 0.6), kinds=None, breath_durations=None) -> SyntheticUtterance:
    """One utterance: speech, pause, speech, ..., speech.

    ``kinds`` fixes the pause kinds; otherwise they are drawn with
    ``kind_probs`` over (breath, silence, click).
    """
    if kinds is None:
        kinds = list(rng.choice(["breath", "silence", "click"], size=n_pauses, p=kind_probs))
    pieces, pauses, spans = [], [], []
    pos = 0

    def emit(x):
        nonlocal pos
        pieces.append(x)
        pos += x.size

    emit(speech(rng, int(rng.uniform(0.3, 0.8) * sr), sr))
    guard = int(GUARD * sr)
    for i, kind in enumerate(kinds):
        if kind == "breath":
            dur = breath_durations[i] if breath_durations is not None else rng.uniform(*breath_duration)
            lead = int(rng.uniform(0.0, 0.03) * sr)
            tail = int(rng.uniform(0.0, 0.03) * sr)
            body = int(dur * sr)
            gap = np.zeros(guard + lead + body + tail + guard)
            gap[guard + lead: guard + lead + body] = breath_noise(rng, body, sr, rng.uniform(*breath_amplitude))
            spans.append(((pos + guard + lead) / sr, (pos + guard + lead + body) / sr))
        else:
            body = int(rng.uniform(*silence_duration) * sr)
            if kind == "click":
                body = max(body, int(0.35 * sr))
            gap = np.zeros(2 * guard + body)
            if kind == "click":
                c = click(rng, sr)
                s = guard + int(rng.uniform(0.2, 0.7) * (body - c.size))
                gap[s:s + c.size] = c
        pauses.append(PauseInterval(utterance_id, (pos + guard) / sr, (pos + gap.size - guard) / sr))
        emit(gap)
        emit(speech(rng, int(rng.uniform(0.3, 0.8) * sr), sr))
    clip = AudioClip(np.clip(np.concatenate(pieces), -1, 1), sr, utterance_id)
    return SyntheticUtterance(clip, pauses, [str(k) for k in kinds], spans)


def generate_corpus(n_utterances, seed=0, prefix="syn", **kwargs) -> list[SyntheticUtterance]:
    rng = np.random.default_rng(seed)
    return [generate_utterance(rng, f"{prefix}{i:04d}", n_pauses=int(rng.integers(2, 5)), **kwargs)
            for i in range(n_utterances)]


def constructed_rule_corpus(seed=0) -> list[SyntheticUtterance]:
    """Twenty designed pauses: 10 breaths (>= 400 ms), 5 silences, 5 clicks, in five utterances."""
    rng = np.random.default_rng(seed)
    layout = [
        ["breath", "silence", "breath", "click"],
        ["click", "breath", "breath", "silence"],
        ["breath", "click", "silence", "breath"],
        ["silence", "breath", "click", "breath"],
        ["breath", "silence", "click", "breath"],
    ]
    out = []
    for u, kinds in enumerate(layout):
        durations = [rng.uniform(0.4, 0.6) for _ in kinds]
        out.append(generate_utterance(rng, f"rule{u:02d}", kinds=kinds, breath_durations=durations,
                                      breath_amplitude=(0.04, 0.08), silence_duration=(0.3, 0.5)))
    return out


def write_corpus(directory, utterances, pause_file="pauses.tsv", gold_file="gold.tsv") -> Path:
    """Write ``<id>.wav`` files, a pause TSV and a gold annotation TSV."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for u in utterances:
        write_wav(directory / f"{u.utterance_id}.wav", u.clip)
    write_pause_file(directory / pause_file, [p for u in utterances for p in u.pauses])
    # gold spans are the breath extents, not the whole pause
    gold_rows = []
    for u in utterances:
        spans = iter(u.breath_spans)
        for p, kind in zip(u.pauses, u.kinds):
            if kind == "breath":
                s, e = next(spans)
                gold_rows.append((PauseInterval(u.utterance_id, s, e), PauseClass.BREATH))
            else:
                gold_rows.append((p, PauseClass.NON_BREATH))
    write_annotation_file(directory / gold_file, gold_rows)
    return directory


# Frozen setup of the synthetic self-training experiment. Breaths of 0.10 to
# 0.45 s mostly fall below the 300 ms duration rule, so the rule labels cover
# a minority of them and pseudo-labels have something to add.
SELFTRAIN_CORPUS = {"n_train": 40, "n_validation": 20, "breath_duration": (0.10, 0.45)}
SELFTRAIN_OVERRIDES = {
    "training": {"epochs": 10, "batch_size": 16},
    "self_training": {"withhold_fraction": 0.3, "max_iterations": 4},
}


def write_selftrain_experiment(directory, seed=0, n_train=None, n_validation=None) -> Path:
    """Write train/validation corpora and a ``config.json`` for ``breathscan selftrain``.

    Layout: ``train/`` (wavs + pauses.tsv), ``validation/`` (wavs + pauses.tsv
    + gold.tsv) and ``config.json`` with relative paths and ``run_dir = run``.
    """
    directory = Path(directory)
    n_train = SELFTRAIN_CORPUS["n_train"] if n_train is None else n_train
    n_validation = SELFTRAIN_CORPUS["n_validation"] if n_validation is None else n_validation
    kw = {"breath_duration": SELFTRAIN_CORPUS["breath_duration"]}
    write_corpus(directory / "train", generate_corpus(n_train, seed=seed, prefix="tr", **kw))
    write_corpus(directory / "validation", generate_corpus(n_validation, seed=seed + 1000, prefix="va", **kw))
    config = {
        "seed": seed,
        "paths": {
            "corpus_dir": "train",
            "pause_tsv": "train/pauses.tsv",
            "validation_dir": "validation",
            "validation_pause_tsv": "validation/pauses.tsv",
            "gold_tsv": "validation/gold.tsv",
            "run_dir": "run",
        },
        **SELFTRAIN_OVERRIDES,
    }
    (directory / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    return directory
