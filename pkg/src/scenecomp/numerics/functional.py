"""Fused differentiable kernels: linear, softmax, layer norm, attention."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, as_tensor, unbroadcast

LN_EPS = 1e-5


def linear(x, weight, bias=None) -> Tensor:
    """x @ W + b over the last axis; x may carry any number of leading dims."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {weight.shape[0]}")
    out = np.matmul(x.data, weight.data)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, weight.data.T) if x.requires_grad else None
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw)


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    if gain is not None and as_tensor(gain).shape[-1] != d:
        raise ValueError("layer_norm gain does not match last dim")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    parents = [x]
    out = xhat
    if gain is not None:
        gain = as_tensor(gain)
        out = out * gain.data
        parents.append(gain)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gy = g * gain.data if gain is not None else g
        gx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if gain is not None:
            res.append(unbroadcast(g * xhat, gain.shape))
        if bias is not None:
            res.append(unbroadcast(g, bias.shape))
        return tuple(res)

    return _make(out, parents, bw)


def softmax_attention(q, k, v, return_weights: bool = False):
    """softmax(Q K^T / sqrt(d)) V over the last two axes.

    q: (..., Lq, d), k: (..., Lk, d), v: (..., Lk, dv). Leading dims broadcast.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    d = q.shape[-1]
    if d == 0:
        raise ValueError("attention feature dim is 0")
    if k.shape[-1] != d:
        raise ValueError(f"query/key dims differ: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError("keys and values need the same sequence length")
    if k.shape[-2] == 0:
        raise ValueError("attention over an empty key sequence")
    scale = float(1.0 / np.sqrt(d))
    s = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    out = np.matmul(p, v.data)

    def bw(g):
        gv = np.matmul(np.swapaxes(p, -1, -2), g)
        gp = np.matmul(g, np.swapaxes(v.data, -1, -2))
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
        gq = np.matmul(gs, k.data)
        gk = np.matmul(np.swapaxes(gs, -1, -2), q.data)
        return unbroadcast(gq, q.shape), unbroadcast(gk, k.shape), unbroadcast(gv, v.shape)

    res = _make(out, (q, k, v), bw)
    if return_weights:
        return res, p
    return res
