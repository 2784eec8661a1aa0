"""AdamW with a linear warmup / linear decay learning-rate schedule."""

from __future__ import annotations

import numpy as np

__all__ = ["AdamW", "linear_warmup_decay"]


def linear_warmup_decay(step: int, total_steps: int, peak_lr: float, warmup_fraction: float = 0.1) -> float:
    """Learning rate for 0-based ``step``: 0 -> peak over the warmup, then linearly to 0."""
    if total_steps <= 0:
        return 0.0
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    s = step + 1
    if s <= warmup:
        return peak_lr * s / warmup
    return peak_lr * max(0.0, (total_steps - s) / max(1, total_steps - warmup))


class AdamW:
    """Adam with decoupled weight decay.

    Decay applies to matrices and higher-rank tensors only; biases, norm gains
    and relative-position tables are left undecayed.
    """

    def __init__(self, params: dict[str, np.ndarray], weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def _decays(self, name, value):
        leaf = name.rsplit(".", 1)[-1]
        return value.ndim >= 2 and leaf != "rel_bias"

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and self._decays(name, p):
                p -= lr * self.weight_decay * p
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
