"""Finite-difference checks for the hand-written backward passes."""

from __future__ import annotations

import numpy as np

from ..labeling import MASK
from .model import Detector, masked_bce_with_grad

__all__ = ["relative_error", "numeric_grad", "grad_check", "check_module"]


def relative_error(analytic, numeric, floor=1e-8) -> float:
    """Max of ``|a - n| / max(|a|, |n|, floor)``.

    Gradients that vanish exactly (attention key biases, to which the softmax
    is invariant) score about ``roundoff / (h * floor)`` here, not zero.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(f, arr: np.ndarray, h: float = 1e-4, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place).

    ``indices`` restricts the flat entries that are probed; others stay 0.
    """
    g = np.zeros(arr.shape, dtype=np.float64)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size) if indices is None else indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def grad_check(model: Detector, batch, h: float = 1e-4, max_entries: int | None = None,
               seed: int = 0, steps=None) -> float:
    """Max relative error between backprop and central differences.

    ``model`` should be float64 with dropout irrelevant (evaluation context is
    used). With ``max_entries`` only that many random entries of each
    parameter tensor are probed, which keeps full-size models tractable.
    ``steps`` (default ``(h,)``) lists finite-difference step sizes; each
    entry is scored with the best of them. Large steps break on ReLU kinks
    near zero, small ones on roundoff for tiny gradients, and a wrong
    analytic gradient disagrees with every step.
    """
    labels = np.where(batch.mask, batch.labels, MASK).astype(np.int8)
    steps = (h,) if steps is None else tuple(steps)

    def loss():
        logits, _ = model.forward_logits(batch)
        return masked_bce_with_grad(logits, labels)[0]

    model.loss_and_grad(batch)
    analytic = dict(model.named_grads())
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in model.named_parameters():
        idx = np.arange(value.size)
        if max_entries is not None and value.size > max_entries:
            idx = np.sort(rng.choice(value.size, max_entries, replace=False))
        a = analytic[name].reshape(-1)[idx]
        errors = [_entry_errors(a, numeric_grad(loss, value, step, idx).reshape(-1)[idx]) for step in steps]
        worst = max(worst, float(np.max(np.min(errors, axis=0))) if idx.size else 0.0)
    return worst


def _entry_errors(a, n, floor=1e-8):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_module(forward, backward, module, x, h: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Gradient check of one layer under the scalar loss ``sum(R * y)`` with fixed random ``R``.

    ``forward(x) -> (y, cache)`` and ``backward(dy, cache) -> dx`` wrap the
    layer call. Returns max relative errors for the input and each parameter.
    """
    rng = np.random.default_rng(seed)
    y, _ = forward(x)
    R = rng.standard_normal(y.shape)

    def loss():
        return float(np.sum(R * forward(x)[0]))

    module.zero_grad()
    _, cache = forward(x)
    dx = backward(R, cache)
    errors = {"input": relative_error(dx, numeric_grad(loss, x, h))}
    analytic = {k: v.copy() for k, v in module.named_grads()}
    for name, value in module.named_parameters():
        errors[name] = relative_error(analytic[name], numeric_grad(loss, value, h))
    return errors
