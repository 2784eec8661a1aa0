"""Brute-force reference implementations used by the tests.

These are written directly from the textbook definitions (explicit DFT sums,
piecewise triangle filters evaluated bin by bin, explicit set membership) and
share no code with the package.
"""

import math

import numpy as np


def slaney_hz_to_mel(f):
    if f < 1000.0:
        return 3.0 * f / 200.0
    return 15.0 + 27.0 * math.log(f / 1000.0) / math.log(6.4)


def slaney_mel_to_hz(m):
    if m < 15.0:
        return 200.0 * m / 3.0
    return 1000.0 * math.exp((m - 15.0) * math.log(6.4) / 27.0)


def filterbank(sr, n_fft, n_mels, fmin=0.0, fmax=None):
    fmax = sr / 2 if fmax is None else fmax
    lo, hi = slaney_hz_to_mel(fmin), slaney_hz_to_mel(fmax)
    edges = [slaney_mel_to_hz(lo + (hi - lo) * i / (n_mels + 1)) for i in range(n_mels + 2)]
    n_bins = n_fft // 2 + 1
    W = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = edges[m], edges[m + 1], edges[m + 2]
        for k in range(n_bins):
            f = k * sr / n_fft
            if left <= f <= center:
                w = (f - left) / (center - left)
            elif center < f <= right:
                w = (right - f) / (right - center)
            else:
                w = 0.0
            W[m, k] = w * 2.0 / (right - left)
    return W


def dft_power(frame):
    n = len(frame)
    k = np.arange(n // 2 + 1)[:, None]
    t = np.arange(n)[None, :]
    re = np.sum(frame * np.cos(2 * np.pi * k * t / n), axis=1)
    im = -np.sum(frame * np.sin(2 * np.pi * k * t / n), axis=1)
    return re * re + im * im


def log_mel(x, sr, win, hop, n_mels, fb=None):
    """Unpadded framing, periodic Hann, explicit DFT, mel, dB floored at max - 80."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < win:
        x = np.concatenate([x, np.zeros(win - len(x))])
    n_frames = 1 + (len(x) - win) // hop
    hann = np.array([0.5 - 0.5 * math.cos(2 * math.pi * i / win) for i in range(win)])
    fb = filterbank(sr, win, n_mels) if fb is None else fb
    cols = []
    for f in range(n_frames):
        seg = x[f * hop: f * hop + win] * hann
        cols.append(fb @ dft_power(seg))
    mel = np.stack(cols, axis=1)
    db = 10.0 * np.log10(np.maximum(mel, 1e-10))
    return np.maximum(db, db.max() - 80.0)


def zcr_window(w):
    s = [1 if v >= 0 else -1 for v in w]
    return sum(0.5 * abs(s[i] - s[i - 1]) for i in range(1, len(s))) / (len(s) - 1)


def labels(F, P, B, U, mask=-1):
    out = []
    for t in range(F):
        if t in B:
            out.append(1)
        elif t in U:
            out.append(0)
        elif t in P:
            out.append(mask)
        else:
            out.append(0)
    return out


def confusion(pred_pos, gold_pos):
    tp = fp = fn = tn = 0
    for p, g in zip(pred_pos, gold_pos):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn
