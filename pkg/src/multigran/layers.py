"""Forward/backward pairs for the transformer pieces used by the encoder and decoder.

Each ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache and returns input/parameter gradients.
Arrays may be float32 or float64; nothing here changes dtype.
"""

from __future__ import annotations

import math

import numpy as np

_GELU_C = math.sqrt(2.0 / math.pi)
_NEG = -1e9


def linear_forward(x, w, b):
    return x @ w + b, (x, w)


def linear_backward(dy, cache):
    x, w = cache
    dx = dy @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


def gelu_forward(x):
    # tanh approximation; odd part is exactly x/2, so gelu(x) - gelu(-x) == x
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def layer_norm_forward(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    dxhat = dy * g
    dx = rstd * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, (dy2 * xhat.reshape(dy2.shape)).sum(axis=0), dy2.sum(axis=0)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dy, y, axis=-1):
    return y * (dy - (dy * y).sum(axis=axis, keepdims=True))


def attention_forward(x, p, heads, allowed=None):
    """Multi-head self-attention.

    ``x`` is (B, S, D); ``p`` holds ``wqkv`` (D, 3D), ``bqkv``, ``wo`` (D, D),
    ``bo``. ``allowed`` is a boolean (S, S) or (B, S, S) array; False entries
    are excluded from the softmax.
    """
    B, S, D = x.shape
    dh = D // heads
    qkv, c_qkv = linear_forward(x, p["wqkv"], p["bqkv"])
    qkv = qkv.reshape(B, S, 3, heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / math.sqrt(dh)
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    if allowed is not None:
        mask = allowed if allowed.ndim == 2 else allowed[:, None]
        scores = np.where(mask, scores, scores.dtype.type(_NEG))
    att = softmax(scores)
    ctx = att @ v
    merged = ctx.transpose(0, 2, 1, 3).reshape(B, S, D)
    out, c_o = linear_forward(merged, p["wo"], p["bo"])
    return out, (c_qkv, q, k, v, att, c_o, heads, scale)


def attention_backward(dout, cache):
    c_qkv, q, k, v, att, c_o, heads, scale = cache
    B, H, S, dh = q.shape
    dmerged, dwo, dbo = linear_backward(dout, c_o)
    dctx = dmerged.reshape(B, S, H, dh).transpose(0, 2, 1, 3)
    datt = dctx @ v.transpose(0, 1, 3, 2)
    dv = att.transpose(0, 1, 3, 2) @ dctx
    # masked entries have att == 0, so they receive no gradient
    dscores = softmax_backward(datt, att) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, S, 3 * H * dh)
    dx, dwqkv, dbqkv = linear_backward(dqkv, c_qkv)
    return dx, {"wqkv": dwqkv, "bqkv": dbqkv, "wo": dwo, "bo": dbo}
