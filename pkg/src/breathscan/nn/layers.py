"""Numpy layers with explicit backward passes.

Every layer exposes ``forward(x, ...) -> (y, cache)`` and
``backward(dy, cache) -> dx``; parameter gradients accumulate into
``layer.grads`` under the same names as ``layer.params``. Sequence tensors are
laid out ``[batch, time, channels]`` and ``mask`` is a ``[batch, time]``
boolean array marking real (non-padded) frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Context",
    "Module",
    "Linear",
    "LayerNorm",
    "Dropout",
    "Conv2dSubsample",
    "DepthwiseConv1d",
    "ConvTranspose1d",
    "BiLSTM",
    "RelPosSelfAttention",
    "FeedForward",
    "ConvModule",
    "ConformerBlock",
    "sigmoid",
    "swish",
    "swish_grad",
]


@dataclass
class Context:
    train: bool = False
    rng: np.random.Generator | None = None


EVAL = Context()


def sigmoid(x):
    # tanh form is overflow-free for large |x|
    return 0.5 * np.tanh(0.5 * x) + 0.5


def swish(x):
    return x * sigmoid(x)


def swish_grad(x):
    s = sigmoid(x)
    return s + x * s * (1 - s)


def apply_mask(x, mask):
    if mask is None:
        return x
    return x * mask[..., None].astype(x.dtype)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Container for named parameters and child modules."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add(self, name, module):
        self.children[name] = module
        return module

    def named_parameters(self, prefix=""):
        for name, value in self.params.items():
            yield prefix + name, value
        for cname, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_grads(self, prefix=""):
        for name in self.params:
            yield prefix + name, self.grads[name]
        for cname, child in self.children.items():
            yield from child.named_grads(f"{prefix}{cname}.")

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        for child in self.children.values():
            child.zero_grad()

    def astype(self, dtype):
        self.params = {k: v.astype(dtype) for k, v in self.params.items()}
        for child in self.children.values():
            child.astype(dtype)
        self.zero_grad()
        return self

    def _acc(self, name, g):
        self.grads[name] += g

    def num_parameters(self) -> int:
        return sum(v.size for _, v in self.named_parameters())


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = _uniform(rng, n_in, (n_in, n_out), dtype)
        self.params["bias"] = _uniform(rng, n_in, (n_out,), dtype)
        self.zero_grad()

    def forward(self, x):
        return x @ self.params["weight"] + self.params["bias"], x

    def backward(self, dy, x):
        W = self.params["weight"]
        self._acc("weight", x.reshape(-1, W.shape[0]).T @ dy.reshape(-1, W.shape[1]))
        self._acc("bias", dy.reshape(-1, W.shape[1]).sum(axis=0))
        return dy @ W.T


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.params["gain"] = np.ones(dim, dtype=dtype)
        self.params["bias"] = np.zeros(dim, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * inv
        return xhat * self.params["gain"] + self.params["bias"], (xhat, inv)

    def backward(self, dy, cache):
        xhat, inv = cache
        d = xhat.shape[-1]
        self._acc("gain", (dy * xhat).reshape(-1, d).sum(axis=0))
        self._acc("bias", dy.reshape(-1, d).sum(axis=0))
        dxhat = dy * self.params["gain"]
        return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


class Dropout:
    def __init__(self, p):
        self.p = p

    def forward(self, x, ctx):
        if not ctx.train or self.p == 0:
            return x, None
        keep = (ctx.rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        return x * keep, keep

    def backward(self, dy, keep):
        return dy if keep is None else dy * keep


class Conv2dSubsample(Module):
    """3x3 convolution, stride 2 on both axes, padding 1, on ``[B, T, M, C]`` input."""

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.params["weight"] = _uniform(rng, 9 * c_in, (3, 3, c_in, c_out), dtype)
        self.params["bias"] = _uniform(rng, 9 * c_in, (c_out,), dtype)
        self.zero_grad()

    @staticmethod
    def out_size(n):
        return (n + 1) // 2

    def forward(self, x):
        B, T, M, C = x.shape
        T2, M2 = self.out_size(T), self.out_size(M)
        xp = np.pad(x, ((0, 0), (1, 2), (1, 2), (0, 0)))
        cols = np.empty((B, T2, M2, 3, 3, C), dtype=x.dtype)
        for i in range(3):
            for j in range(3):
                cols[:, :, :, i, j, :] = xp[:, i:i + 2 * T2:2, j:j + 2 * M2:2, :]
        cols = cols.reshape(B * T2 * M2, 9 * C)
        y = cols @ self.params["weight"].reshape(9 * C, self.c_out) + self.params["bias"]
        return y.reshape(B, T2, M2, self.c_out), (cols, x.shape)

    def backward(self, dy, cache, need_input_grad=True):
        cols, (B, T, M, C) = cache
        T2, M2 = dy.shape[1], dy.shape[2]
        dyf = dy.reshape(-1, self.c_out)
        W = self.params["weight"].reshape(9 * C, self.c_out)
        self._acc("weight", (cols.T @ dyf).reshape(3, 3, C, self.c_out))
        self._acc("bias", dyf.sum(axis=0))
        if not need_input_grad:
            return None
        dcols = (dyf @ W.T).reshape(B, T2, M2, 3, 3, C)
        dxp = np.zeros((B, T + 3, M + 3, C), dtype=dy.dtype)
        for i in range(3):
            for j in range(3):
                dxp[:, i:i + 2 * T2:2, j:j + 2 * M2:2, :] += dcols[:, :, :, i, j, :]
        return dxp[:, 1:T + 1, 1:M + 1, :]


class DepthwiseConv1d(Module):
    """Per-channel 1-D convolution along time with 'same' zero padding."""

    def __init__(self, channels, kernel, rng, dtype=np.float32):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("depthwise kernel must be odd")
        self.kernel = kernel
        self.params["weight"] = _uniform(rng, kernel, (kernel, channels), dtype)
        self.params["bias"] = _uniform(rng, kernel, (channels,), dtype)
        self.zero_grad()

    def forward(self, x):
        T = x.shape[1]
        pad = self.kernel // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
        W = self.params["weight"]
        y = np.broadcast_to(self.params["bias"], x.shape).copy()
        for j in range(self.kernel):
            y += xp[:, j:j + T] * W[j]
        return y, xp

    def backward(self, dy, xp):
        T = dy.shape[1]
        pad = self.kernel // 2
        W = self.params["weight"]
        dW = np.empty_like(W)
        dxp = np.zeros_like(xp)
        for j in range(self.kernel):
            dW[j] = (xp[:, j:j + T] * dy).sum(axis=(0, 1))
            dxp[:, j:j + T] += dy * W[j]
        self._acc("weight", dW)
        self._acc("bias", dy.sum(axis=(0, 1)))
        return dxp[:, pad:pad + T]


class ConvTranspose1d(Module):
    """Transposed convolution along time, kernel 3, stride 2: length T -> 2T + 1."""

    kernel = 3
    stride = 2

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.params["weight"] = _uniform(rng, c_in, (self.kernel, c_in, c_out), dtype)
        self.params["bias"] = _uniform(rng, c_in, (c_out,), dtype)
        self.zero_grad()

    @staticmethod
    def out_size(n):
        return 2 * n + 1

    def forward(self, x):
        B, T, _ = x.shape
        W = self.params["weight"]
        y = np.zeros((B, self.out_size(T), W.shape[2]), dtype=x.dtype)
        for j in range(self.kernel):
            y[:, j:j + 2 * T:2] += x @ W[j]
        return y + self.params["bias"], x

    def backward(self, dy, x):
        T = x.shape[1]
        W = self.params["weight"]
        xf = x.reshape(-1, W.shape[1])
        dW = np.empty_like(W)
        dx = np.zeros_like(x)
        for j in range(self.kernel):
            dz = dy[:, j:j + 2 * T:2]
            dW[j] = xf.T @ dz.reshape(-1, W.shape[2])
            dx += dz @ W[j].T
        self._acc("weight", dW)
        self._acc("bias", dy.reshape(-1, W.shape[2]).sum(axis=0))
        return dx


def _orthogonal(rng, n, dtype):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * np.sign(np.diag(r))).astype(dtype)


class BiLSTM(Module):
    """Bidirectional LSTM; both directions run in one time loop.

    Padded steps hold the recurrent state, so the backward direction of each
    sequence starts from a zero state at its own last real frame.
    """

    def __init__(self, n_in, hidden, rng, dtype=np.float32):
        super().__init__()
        self.hidden = hidden
        h4 = 4 * hidden
        self.params["w_input"] = _uniform(rng, hidden, (2, n_in, h4), dtype)
        self.params["w_hidden"] = np.stack([
            np.concatenate([_orthogonal(rng, hidden, dtype) for _ in range(4)], axis=1)
            for _ in range(2)
        ])
        b = _uniform(rng, hidden, (2, h4), dtype)
        b[:, hidden:2 * hidden] += 1.0  # forget-gate bias
        self.params["bias"] = b
        self.zero_grad()

    def forward(self, x, mask):
        B, T, _ = x.shape
        H = self.hidden
        Wx, Wh, b = self.params["w_input"], self.params["w_hidden"], self.params["bias"]
        # direction 1 sees time reversed
        xs = np.stack([x, x[:, ::-1]])  # [2, B, T, n_in]
        ms = np.stack([mask, mask[:, ::-1]]).astype(x.dtype)[..., None]  # [2, B, T, 1]
        xw = np.matmul(xs.reshape(2, B * T, -1), Wx).reshape(2, B, T, -1) + b[:, None, None, :]
        h = np.zeros((2, B, H), dtype=x.dtype)
        c = np.zeros_like(h)
        hs = np.empty((2, B, T, H), dtype=x.dtype)
        steps = []
        for t in range(T):
            a = xw[:, :, t] + np.matmul(h, Wh)
            gates = sigmoid(a)
            g = np.tanh(a[..., 2 * H:3 * H])
            i, f, o = gates[..., :H], gates[..., H:2 * H], gates[..., 3 * H:]
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            m = ms[:, :, t]
            steps.append((h, c, i, f, g, o, tc))
            c = m * c_new + (1 - m) * c
            h = m * (o * tc) + (1 - m) * h
            hs[:, :, t] = h
        out = np.concatenate([hs[0], hs[1][:, ::-1]], axis=-1)
        return out, (xs, ms, steps)

    def backward(self, dy, cache):
        xs, ms, steps = cache
        H = self.hidden
        Wx, Wh = self.params["w_input"], self.params["w_hidden"]
        _, B, T, _ = xs.shape
        dhs = np.stack([dy[..., :H], dy[..., H:][:, ::-1]])  # [2, B, T, H]
        dxw = np.empty((2, B, T, 4 * H), dtype=dy.dtype)
        dWh = np.zeros_like(Wh)
        dh = np.zeros((2, B, H), dtype=dy.dtype)
        dc = np.zeros_like(dh)
        for t in range(T - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = steps[t]
            m = ms[:, :, t]
            dh = dh + dhs[:, :, t]
            dh_new = m * dh
            dct = m * dc + dh_new * o * (1 - tc * tc)
            da = np.concatenate([
                dct * g * i * (1 - i),
                dct * c_prev * f * (1 - f),
                dct * i * (1 - g * g),
                dh_new * tc * o * (1 - o),
            ], axis=-1)
            dxw[:, :, t] = da
            dWh += np.matmul(h_prev.transpose(0, 2, 1), da)
            dh = np.matmul(da, Wh.transpose(0, 2, 1)) + (1 - m) * dh
            dc = dct * f + (1 - m) * dc
        self._acc("w_hidden", dWh)
        xf = xs.reshape(2, B * T, -1)
        dxwf = dxw.reshape(2, B * T, -1)
        self._acc("w_input", np.matmul(xf.transpose(0, 2, 1), dxwf))
        self._acc("bias", dxwf.sum(axis=1))
        dxs = np.matmul(dxwf, Wx.transpose(0, 2, 1)).reshape(xs.shape)
        return dxs[0] + dxs[1][:, ::-1]


class RelPosSelfAttention(Module):
    """Multi-head self-attention with a learned, clipped relative-position bias."""

    def __init__(self, dim, n_heads, rng, max_distance=16, dtype=np.float32):
        super().__init__()
        if dim % n_heads:
            raise ValueError("dim must be divisible by n_heads")
        self.n_heads, self.max_distance = n_heads, max_distance
        self.q = self.add("query", Linear(dim, dim, rng, dtype))
        self.k = self.add("key", Linear(dim, dim, rng, dtype))
        self.v = self.add("value", Linear(dim, dim, rng, dtype))
        self.o = self.add("out", Linear(dim, dim, rng, dtype))
        self.params["rel_bias"] = np.zeros((n_heads, 2 * max_distance + 1), dtype=dtype)
        self.zero_grad()

    def _rel_index(self, T):
        r = np.arange(T)
        return np.clip(r[None, :] - r[:, None], -self.max_distance, self.max_distance) + self.max_distance

    def _split(self, x):
        B, T, D = x.shape
        return x.reshape(B, T, self.n_heads, D // self.n_heads).transpose(0, 2, 1, 3)

    def forward(self, x, mask):
        B, T, D = x.shape
        q, cq = self.q.forward(x)
        k, ck = self.k.forward(x)
        v, cv = self.v.forward(x)
        Q, K, V = self._split(q), self._split(k), self._split(v)
        scale = 1.0 / np.sqrt(D // self.n_heads)
        rel = self._rel_index(T)
        S = (Q @ K.transpose(0, 1, 3, 2)) * scale + self.params["rel_bias"][:, rel][None]
        S = np.where(mask[:, None, None, :], S, -np.inf)
        S = S - S.max(axis=-1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=-1, keepdims=True)
        ctxv = (A @ V).transpose(0, 2, 1, 3).reshape(B, T, D)
        y, co = self.o.forward(ctxv)
        return y, (cq, ck, cv, co, Q, K, V, A, rel, scale)

    def backward(self, dy, cache):
        cq, ck, cv, co, Q, K, V, A, rel, scale = cache
        B, T, D = dy.shape
        dctx = self.o.backward(dy, co)
        dO = self._split(dctx)
        dA = dO @ V.transpose(0, 1, 3, 2)
        dV = A.transpose(0, 1, 3, 2) @ dO
        dS = A * (dA - (dA * A).sum(axis=-1, keepdims=True))
        dSsum = dS.sum(axis=0)
        nb = 2 * self.max_distance + 1
        flat = rel.ravel()
        self._acc("rel_bias", np.stack([
            np.bincount(flat, weights=dSsum[h].ravel(), minlength=nb) for h in range(self.n_heads)
        ]).astype(dy.dtype))
        dQ = (dS @ K) * scale
        dK = (dS.transpose(0, 1, 3, 2) @ Q) * scale

        def merge(z):
            return z.transpose(0, 2, 1, 3).reshape(B, T, D)

        return (self.q.backward(merge(dQ), cq) + self.k.backward(merge(dK), ck)
                + self.v.backward(merge(dV), cv))


class FeedForward(Module):
    """Half-step residual feed-forward: ``x + 0.5 * W2(drop(swish(W1(LN(x)))))``."""

    def __init__(self, dim, expansion, dropout, rng, dtype=np.float32):
        super().__init__()
        self.norm = self.add("norm", LayerNorm(dim, dtype))
        self.w1 = self.add("w1", Linear(dim, expansion * dim, rng, dtype))
        self.w2 = self.add("w2", Linear(expansion * dim, dim, rng, dtype))
        self.drop1, self.drop2 = Dropout(dropout), Dropout(dropout)

    def forward(self, x, ctx=EVAL):
        z, cn = self.norm.forward(x)
        a, c1 = self.w1.forward(z)
        h, cd1 = self.drop1.forward(swish(a), ctx)
        y, c2 = self.w2.forward(h)
        y, cd2 = self.drop2.forward(y, ctx)
        return x + 0.5 * y, (cn, c1, a, cd1, c2, cd2)

    def backward(self, dy, cache):
        cn, c1, a, cd1, c2, cd2 = cache
        d = self.drop2.backward(0.5 * dy, cd2)
        d = self.drop1.backward(self.w2.backward(d, c2), cd1)
        d = self.w1.backward(d * swish_grad(a), c1)
        return dy + self.norm.backward(d, cn)


class ConvModule(Module):
    """Pointwise -> GLU -> depthwise conv -> LN -> swish -> pointwise, residual."""

    def __init__(self, dim, kernel, dropout, rng, dtype=np.float32):
        super().__init__()
        self.norm = self.add("norm", LayerNorm(dim, dtype))
        self.pw1 = self.add("pointwise1", Linear(dim, 2 * dim, rng, dtype))
        self.dw = self.add("depthwise", DepthwiseConv1d(dim, kernel, rng, dtype))
        self.norm2 = self.add("norm2", LayerNorm(dim, dtype))
        self.pw2 = self.add("pointwise2", Linear(dim, dim, rng, dtype))
        self.drop = Dropout(dropout)

    def forward(self, x, mask, ctx=EVAL):
        D = x.shape[-1]
        z, cn = self.norm.forward(x)
        a, c1 = self.pw1.forward(z)
        sg = sigmoid(a[..., D:])
        glu = apply_mask(a[..., :D] * sg, mask)
        h, cdw = self.dw.forward(glu)
        h2, cn2 = self.norm2.forward(h)
        y, c2 = self.pw2.forward(swish(h2))
        y, cd = self.drop.forward(y, ctx)
        return x + y, (cn, c1, a, sg, cdw, cn2, h2, c2, cd, mask)

    def backward(self, dy, cache):
        cn, c1, a, sg, cdw, cn2, h2, c2, cd, mask = cache
        D = dy.shape[-1]
        d = self.pw2.backward(self.drop.backward(dy, cd), c2) * swish_grad(h2)
        d = apply_mask(self.dw.backward(self.norm2.backward(d, cn2), cdw), mask)
        da = np.concatenate([d * sg, d * a[..., :D] * sg * (1 - sg)], axis=-1)
        return dy + self.norm.backward(self.pw1.backward(da, c1), cn)


class ConformerBlock(Module):
    """FF/2 -> self-attention -> conv module -> FF/2 -> LayerNorm."""

    def __init__(self, dim, n_heads, kernel, dropout, rng, ff_expansion=4, max_distance=16,
                 dtype=np.float32):
        super().__init__()
        self.ff1 = self.add("ff1", FeedForward(dim, ff_expansion, dropout, rng, dtype))
        self.att_norm = self.add("att_norm", LayerNorm(dim, dtype))
        self.att = self.add("attention", RelPosSelfAttention(dim, n_heads, rng, max_distance, dtype))
        self.att_drop = Dropout(dropout)
        self.conv = self.add("conv", ConvModule(dim, kernel, dropout, rng, dtype))
        self.ff2 = self.add("ff2", FeedForward(dim, ff_expansion, dropout, rng, dtype))
        self.norm = self.add("norm", LayerNorm(dim, dtype))

    def forward(self, x, mask, ctx=EVAL):
        x, c_ff1 = self.ff1.forward(x, ctx)
        z, c_an = self.att_norm.forward(x)
        a, c_att = self.att.forward(z, mask)
        a, c_ad = self.att_drop.forward(a, ctx)
        x = x + a
        x, c_conv = self.conv.forward(x, mask, ctx)
        x, c_ff2 = self.ff2.forward(x, ctx)
        y, c_n = self.norm.forward(x)
        return y, (c_ff1, c_an, c_att, c_ad, c_conv, c_ff2, c_n)

    def backward(self, dy, cache):
        c_ff1, c_an, c_att, c_ad, c_conv, c_ff2, c_n = cache
        d = self.norm.backward(dy, c_n)
        d = self.ff2.backward(d, c_ff2)
        d = self.conv.backward(d, c_conv)
        d = d + self.att_norm.backward(self.att.backward(self.att_drop.backward(d, c_ad), c_att), c_an)
        return self.ff1.backward(d, c_ff1)
