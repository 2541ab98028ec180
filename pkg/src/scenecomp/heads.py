"""Output module: the position head and the toy structure decoder."""
from __future__ import annotations

import numpy as np

from . import geomath as gm
from . import numerics as nx
from .geomath import Pose8, VoxelGrid
from .latents import C_LAT, D_LAT, SparseLatent, bits_to_fine, fine_to_bits
from .numerics import Module, Tensor

__all__ = ["PositionHead", "StructureDecoder", "SparseLatent", "predict_clean", "decode_structure",
           "soft_occupancy", "poses_from_vectors", "assemble_poses", "POSE_DIM"]

POSE_DIM = 8
SCALE_FLOOR = 1e-6


class PositionHead(Module):
    """Self-attention across the non-query position tokens, then a linear map to 8-D poses."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, layers: int = 4):
        self.norm_in = nx.LayerNorm(dim)
        self.layers = [nx.TransformerLayer(dim, heads, rng) for _ in range(layers)]
        self.norm_out = nx.LayerNorm(dim)
        self.proj = nx.Linear(dim, POSE_DIM, rng)

    def raw(self, tokens) -> Tensor:
        x = self.norm_in(tokens)
        for layer in self.layers:
            x = layer(x)
        return self.proj(self.norm_out(x))

    def forward(self, tokens) -> Tensor:
        """tokens: (..., N-1, C) -> (..., N-1, 8) with unit q and s > 0."""
        tokens = nx.as_tensor(tokens)
        if tokens.shape[-2] == 0:
            return nx.Tensor(np.zeros(tokens.shape[:-1] + (POSE_DIM,), dtype=tokens.dtype))
        return constrain_pose(self.raw(tokens))


def constrain_pose(raw: Tensor) -> Tensor:
    t, q, s = nx.split(raw, [3, 4, 1])
    q = q / nx.sqrt(nx.tsum(q * q, axis=-1, keepdims=True) + 1e-24)
    s = nx.softplus(s) + SCALE_FLOOR
    return nx.concat([t, q, s], axis=-1)


def poses_from_vectors(vecs) -> list[Pose8]:
    return [Pose8.from_vector(v) for v in np.asarray(vecs, dtype=np.float64).reshape(-1, POSE_DIM)]


def assemble_poses(vecs, n_assets: int, query_index: int = 0) -> list[Pose8]:
    """Full per-asset pose list with the query pinned to identity."""
    others = poses_from_vectors(vecs) if n_assets > 1 else []
    if len(others) != n_assets - 1:
        raise ValueError("pose count does not match asset count")
    out = list(others)
    out.insert(query_index, Pose8.identity())
    return out


def predict_clean(x_t, v, t):
    """Invert the straight path: x0 = x_t - t * v."""
    if isinstance(x_t, Tensor) or isinstance(v, Tensor):
        return nx.as_tensor(x_t) - nx.as_tensor(v) * nx.as_tensor(t)
    return np.asarray(x_t) - np.asarray(t) * np.asarray(v)


class StructureDecoder(Module):
    """Per-voxel MLP from latent features to logits over the voxel's 2x2x2 sub-cells."""

    def __init__(self, rng: np.random.Generator, channels: int = C_LAT, hidden: int = 32):
        self.fc1 = nx.Linear(channels, hidden, rng)
        self.fc2 = nx.Linear(hidden, hidden, rng)
        self.fc3 = nx.Linear(hidden, 8, rng)

    def forward(self, feats) -> Tensor:
        h = nx.gelu(self.fc1(feats))
        return self.fc3(nx.gelu(self.fc2(h)))

    def logits_dense(self, dense) -> np.ndarray:
        with nx.no_grad():
            return self(np.asarray(dense, dtype=self.fc1.weight.dtype)).data

    def active_mask(self, dense) -> np.ndarray:
        """Voxels the decoder would fill at all; used to sparsify sampled latents."""
        return (self.logits_dense(dense) > 0).any(axis=-1)

    def to_sparse(self, dense) -> SparseLatent:
        return SparseLatent.from_dense(np.asarray(dense, dtype=np.float32), self.active_mask(dense))


def decode_structure(latent: SparseLatent, decoder: StructureDecoder,
                     res: int = D_LAT) -> tuple[VoxelGrid, np.ndarray]:
    """Hard decode: fine occupancy grid over [-1, 1]^3 and its surface-cell centroids."""
    bits = np.zeros((res, res, res, 8), dtype=bool)
    if len(latent):
        logits = decoder.logits_dense(latent.feats)
        bits[tuple(latent.positions.T)] = logits > 0
    occ = bits_to_fine(bits)
    return VoxelGrid(occ, -1.0, 1.0), gm.surface_points(occ)


def soft_occupancy(decoder: StructureDecoder, dense: Tensor, sharpness: float = 1.0) -> Tensor:
    """Differentiable fine occupancy probabilities, (..., D, D, D, C) -> (..., 2D, 2D, 2D)."""
    dense = nx.as_tensor(dense)
    p = nx.sigmoid(decoder(dense) * sharpness)
    *lead, D, _, _, _ = p.shape
    nl = len(lead)
    p = nx.reshape(p, (*lead, D, D, D, 2, 2, 2))
    p = nx.transpose(p, tuple(range(nl)) + tuple(nl + a for a in (0, 3, 1, 4, 2, 5)))
    return nx.reshape(p, (*lead, 2 * D, 2 * D, 2 * D))


def decoder_targets(occupancies) -> np.ndarray:
    """Sub-cell bit targets (M, D, D, D, 8) for decoder training."""
    return np.stack([fine_to_bits(o) for o in occupancies]).astype(np.float64)
