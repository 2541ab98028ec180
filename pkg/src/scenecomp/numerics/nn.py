"""Minimal module system and the layer types the model is built from."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype, gelu, reshape, transpose


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def normal_param(rng: np.random.Generator, shape, std: float = 0.02) -> Tensor:
    return param(rng.normal(0.0, std, size=shape))


class Module:
    """Container whose parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                # every tensor attribute is a parameter, frozen or not
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = [k for k in own if k not in state]
        if strict and missing:
            raise KeyError(f"missing tensor(s) in state: {', '.join(missing)}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None):
        std = std if std is not None else 1.0 / np.sqrt(d_in)
        self.weight = normal_param(rng, (d_in, d_out), std)
        self.bias = param(np.zeros(d_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, affine: bool = True):
        self.dim = dim
        self.gain = param(np.ones(dim)) if affine else None
        self.bias = param(np.zeros(dim)) if affine else None

    def forward(self, x):
        return F.layer_norm(x, self.gain, self.bias)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, d_out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, d_out or dim, rng)

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


def split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, C = x.shape
    x = reshape(x, (*lead, L, heads, C // heads))
    nd = x.ndim
    return transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))


def merge_heads(x: Tensor) -> Tensor:
    *lead, H, L, dh = x.shape
    nd = x.ndim
    x = transpose(x, tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1))
    return reshape(x, (*lead, L, H * dh))


class MultiHeadAttention(Module):
    """Multi-head attention; ``context`` defaults to ``x`` (self-attention)."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ctx_dim: int | None = None):
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        ctx_dim = ctx_dim or dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(ctx_dim, dim, rng)
        self.v = Linear(ctx_dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def forward(self, x, context=None):
        context = x if context is None else context
        q = split_heads(self.q(x), self.heads)
        k = split_heads(self.k(context), self.heads)
        v = split_heads(self.v(context), self.heads)
        return self.out(merge_heads(F.softmax_attention(q, k, v)))

    def zero_output(self) -> None:
        self.out.weight.data[...] = 0.0
        self.out.bias.data[...] = 0.0


class TransformerLayer(Module):
    """Pre-norm self-attention + MLP layer with residuals."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, dim * mlp_ratio, rng)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))
