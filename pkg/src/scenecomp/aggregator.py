"""Feature aggregation: stacked DiT blocks over per-asset token blocks.

Each block runs local attention (asset self-attention, then cross-attention
to the asset's own masked-view tokens), global attention (self-attention
over every asset's ``[pos; registers; latents]`` tokens concatenated, then
cross-attention to that asset's scene context), and a feedforward layer.
Timestep conditioning enters through adaptive layer-norm shift/scale/gate.

Position/register tokens join at the first global attention and are carried
between blocks; local attention sees only latent tokens.
"""
from __future__ import annotations

import numpy as np

from . import numerics as nx
from .numerics import Module, Tensor

N_REGISTERS = 4


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def timestep_features(t, dim: int = 64, max_period: float = 10_000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1) * 1000.0
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=-1)


class TimestepEmbedder(Module):
    def __init__(self, dim: int, rng: np.random.Generator, freq_dim: int = 64):
        self.freq_dim = freq_dim
        self.fc1 = nx.Linear(freq_dim, dim, rng)
        self.fc2 = nx.Linear(dim, dim, rng)

    def forward(self, t) -> Tensor:
        f = timestep_features(t, self.freq_dim).astype(self.fc1.weight.dtype)
        return self.fc2(nx.silu(self.fc1(f)))


class LocalAttention(Module):
    """Asset-level self-attention then cross-attention to the asset's visual tokens."""

    def __init__(self, dim: int, heads: int, cond_dim: int, rng: np.random.Generator):
        self.norm_self = nx.LayerNorm(dim, affine=False)
        self.self_attn = nx.MultiHeadAttention(dim, heads, rng)
        self.norm_cross = nx.LayerNorm(dim)
        self.cross_attn = nx.MultiHeadAttention(dim, heads, rng, ctx_dim=cond_dim)

    def forward(self, x: Tensor, f_asset: Tensor, shift=None, scale=None, gate=None) -> Tensor:
        h = self.norm_self(x)
        if shift is not None:
            h = modulate(h, shift, scale)
        a = self.self_attn(h)
        x = x + (a * gate if gate is not None else a)
        return x + self.cross_attn(self.norm_cross(x), f_asset)


class GlobalAttention(Module):
    """Scene-level self-attention over all assets, then cross-attention to scene context."""

    def __init__(self, dim: int, heads: int, cond_dim: int, rng: np.random.Generator):
        self.norm_self = nx.LayerNorm(dim, affine=False)
        self.self_attn = nx.MultiHeadAttention(dim, heads, rng)
        self.norm_cross = nx.LayerNorm(dim)
        self.cross_attn = nx.MultiHeadAttention(dim, heads, rng, ctx_dim=cond_dim)
        self.mod = nx.Linear(dim, 3 * dim, rng, std=0.02)

    def scene_self_attention(self, h: Tensor, c: Tensor | None, asset_level: bool = False) -> Tensor:
        """h: (B, N, T_full, C). ``asset_level`` restricts attention to each asset's own block."""
        if h.ndim != 4:
            raise ValueError("scene state must be (B, N, T, C)")
        B, N, T, C = h.shape
        y = self.norm_self(h)
        gate = None
        if c is not None:
            shift, scale, gate = nx.split(nx.reshape(self.mod(nx.silu(c)), (B, 1, 1, 3 * C)), [C, C, C])
            y = modulate(y, shift, scale)
        if asset_level:
            a = self.self_attn(y)
        else:
            a = nx.reshape(self.self_attn(nx.reshape(y, (B, N * T, C))), (B, N, T, C))
        return h + (a * gate if gate is not None else a)

    def scene_cross_attention(self, h: Tensor, f_scene: Tensor) -> Tensor:
        if f_scene.shape[-2] == 0:
            raise ValueError("empty scene context")
        return h + self.cross_attn(self.norm_cross(h), f_scene)

    def forward(self, h, f_scene, c=None, asset_level=False):
        return self.scene_cross_attention(self.scene_self_attention(h, c, asset_level), f_scene)


class DiTBlock(Module):
    def __init__(self, dim: int, heads: int, cond_dim: int, rng: np.random.Generator, mlp_ratio: int = 2):
        self.dim = dim
        self.local = LocalAttention(dim, heads, cond_dim, rng)
        self.glob = GlobalAttention(dim, heads, cond_dim, rng)
        self.norm_ffn = nx.LayerNorm(dim, affine=False)
        self.ffn = nx.MLP(dim, dim * mlp_ratio, rng)
        self.local_mod = nx.Linear(dim, 6 * dim, rng, std=0.02)

    def forward(self, x: Tensor, pr: Tensor, f_asset: Tensor, f_scene: Tensor, c: Tensor,
                asset_level: bool = False, use_global: bool = True):
        """x: (B, N, T, C) latent tokens; pr: (B, N, 1+R, C) position/register tokens."""
        B, N, T, C = x.shape
        mods = nx.split(nx.reshape(self.local_mod(nx.silu(c)), (B, 1, 1, 6 * C)), [C] * 6)
        sa_shift, sa_scale, sa_gate, ff_shift, ff_scale, ff_gate = mods
        x = self.local(x, f_asset, sa_shift, sa_scale, sa_gate)
        if use_global:
            h = nx.concat([pr, x], axis=2)
            h = self.glob(h, f_scene, c, asset_level)
        else:
            h = nx.concat([pr, x], axis=2)
        h = h + self.ffn(modulate(self.norm_ffn(h), ff_shift, ff_scale)) * ff_gate
        R = pr.shape[2]
        return h[:, :, R:], h[:, :, :R]


class TokenSet(Module):
    """Learned position + register tokens: one set for the query, one shared by the rest."""

    def __init__(self, dim: int, rng: np.random.Generator, n_registers: int = N_REGISTERS):
        self.query = nx.normal_param(rng, (1 + n_registers, dim), 0.02)
        self.other = nx.normal_param(rng, (1 + n_registers, dim), 0.02)

    def forward(self, batch: int, n_assets: int, query_index: int = 0) -> Tensor:
        rows = [self.query if i == query_index else self.other for i in range(n_assets)]
        st = nx.stack(rows, axis=0)  # (N, 1+R, C)
        return nx.expand(st, (batch,) + st.shape)
