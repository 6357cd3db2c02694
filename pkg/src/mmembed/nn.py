"""Forward/backward pairs for the handful of layers the encoders need.

Every ``*_forward`` returns ``(output, cache)`` and the matching
``*_backward`` consumes the upstream gradient and the cache.  Arrays are
``(batch, length, width)``.  Weight gradients are only formed when the
caller asks for them (``want_params``), which keeps frozen stacks cheap.
"""
from __future__ import annotations

import numpy as np

LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class NumericError(FloatingPointError):
    """A non-finite value showed up; ``where`` names the layer or array."""

    def __init__(self, where: str):
        super().__init__(f"non-finite values in {where}")
        self.where = where


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.isfinite(x).all():
        raise NumericError(where)


def _sum_leading(x: np.ndarray) -> np.ndarray:
    return x.reshape(-1, x.shape[-1]).sum(axis=0, dtype=np.float64).astype(x.dtype)


def layer_norm_forward(x, gain, bias):
    # statistics accumulate in float64
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = (xc * rstd).astype(x.dtype)
    rstd = rstd.astype(x.dtype)
    return xhat * gain + bias, (xhat, rstd, gain)


def layer_norm_backward(dy, cache, want_params=True):
    xhat, rstd, gain = cache
    dxhat = dy * gain
    width = xhat.shape[-1]
    dx = rstd * (dxhat - dxhat.sum(-1, keepdims=True) / width
                 - xhat * (dxhat * xhat).sum(-1, keepdims=True) / width)
    if not want_params:
        return dx, None, None
    return dx, _sum_leading(dy * xhat), _sum_leading(dy)


def linear_forward(x, weight, bias):
    return x @ weight + bias, x


def linear_backward(dy, x, weight, want_params=True):
    dx = dy @ weight.T
    if not want_params:
        return dx, None, None
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, _sum_leading(dy)


def gelu_forward(x):
    # in-place chain: this is the hottest elementwise op in the model
    t = x * x
    t *= x
    t *= 0.044715
    t += x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(a, p, prefix, n_heads, key_mask):
    """Multi-head self-attention on a normalized input ``a``.

    ``key_mask`` is ``(batch, length)`` with True for real tokens; padded
    keys get a large negative logit.
    """
    B, L, D = a.shape
    dh = D // n_heads
    qkv, _ = linear_forward(a, p[prefix + "wqkv"], p[prefix + "bqkv"])
    qkv = qkv.reshape(B, L, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scale = 1.0 / np.sqrt(dh)
    logits = (q @ k.transpose(0, 1, 3, 2)) * np.asarray(scale, dtype=a.dtype)
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e9).astype(a.dtype)
        logits = logits + bias[:, None, None, :]
    probs = softmax(logits)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(B, L, D)
    out, _ = linear_forward(ctx, p[prefix + "wo"], p[prefix + "bo"])
    return out, (a, q, k, v, probs, ctx, scale)


def attention_backward(dout, cache, p, prefix, n_heads, want_params=True):
    a, q, k, v, probs, ctx, scale = cache
    B, L, D = a.shape
    dh = D // n_heads
    grads = {}
    dctx, dwo, dbo = linear_backward(dout, ctx, p[prefix + "wo"], want_params)
    dctx = dctx.reshape(B, L, n_heads, dh).transpose(0, 2, 1, 3)
    dprobs = dctx @ v.transpose(0, 1, 3, 2)
    dv = probs.transpose(0, 1, 3, 2) @ dctx
    dlogits = probs * (dprobs - (dprobs * probs).sum(-1, keepdims=True))
    dlogits = dlogits * np.asarray(scale, dtype=a.dtype)
    dq = dlogits @ k
    dk = dlogits.transpose(0, 1, 3, 2) @ q
    dqkv = np.stack([dq, dk, dv]).transpose(1, 3, 0, 2, 4).reshape(B, L, 3 * D)
    da, dw, db = linear_backward(dqkv, a, p[prefix + "wqkv"], want_params)
    if want_params:
        grads.update({prefix + "wqkv": dw, prefix + "bqkv": db,
                      prefix + "wo": dwo, prefix + "bo": dbo})
    return da, grads


def block_forward(x, p, prefix, n_heads, key_mask):
    """Pre-norm transformer block: attention then a 4x GELU feed-forward."""
    a1, ln1 = layer_norm_forward(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    att, att_cache = attention_forward(a1, p, prefix + "attn.", n_heads, key_mask)
    h = x + att
    a2, ln2 = layer_norm_forward(h, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    f1, _ = linear_forward(a2, p[prefix + "ffn.w1"], p[prefix + "ffn.b1"])
    g, gelu_cache = gelu_forward(f1)
    f2, _ = linear_forward(g, p[prefix + "ffn.w2"], p[prefix + "ffn.b2"])
    y = h + f2
    return y, (ln1, att_cache, ln2, a2, gelu_cache, g)


def block_backward(dy, cache, p, prefix, n_heads, want_params=True):
    ln1, att_cache, ln2, a2, gelu_cache, g = cache
    grads = {}
    dg, dw2, db2 = linear_backward(dy, g, p[prefix + "ffn.w2"], want_params)
    df1 = gelu_backward(dg, gelu_cache)
    da2, dw1, db1 = linear_backward(df1, a2, p[prefix + "ffn.w1"], want_params)
    dh_ln, dg2, db2n = layer_norm_backward(da2, ln2, want_params)
    dh = dy + dh_ln
    da1, att_grads = attention_backward(dh, att_cache, p, prefix + "attn.", n_heads, want_params)
    dx_ln, dg1, db1n = layer_norm_backward(da1, ln1, want_params)
    dx = dh + dx_ln
    if want_params:
        grads.update(att_grads)
        grads.update({
            prefix + "ffn.w2": dw2, prefix + "ffn.b2": db2,
            prefix + "ffn.w1": dw1, prefix + "ffn.b1": db1,
            prefix + "ln2.g": dg2, prefix + "ln2.b": db2n,
            prefix + "ln1.g": dg1, prefix + "ln1.b": db1n,
        })
    return dx, grads


def l2_normalize_forward(x):
    norm = np.sqrt((x.astype(np.float64) ** 2).sum(-1, keepdims=True)).astype(x.dtype)
    if np.any(norm == 0):
        raise NumericError("l2 normalization (zero vector)")
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(dy, cache):
    y, norm = cache
    return (dy - y * (dy * y).sum(-1, keepdims=True)) / norm
