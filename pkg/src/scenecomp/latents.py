"""Sparse structure latents and the fixed occupancy encoding behind them.

An asset lives on a ``FINE_RES``^3 canonical occupancy grid spanning
[-1, 1]^3. Each cell of the coarser ``D_LAT``^3 latent grid covers a 2x2x2
block of fine cells; its ``C_LAT`` = 8 features are the block's +-1
occupancy bits mixed by a fixed orthogonal matrix. Cells whose block is
empty are inactive and are dropped from the sparse form.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

D_LAT = 16
FINE_RES = 2 * D_LAT
C_LAT = 8

_MIX = np.linalg.qr(np.random.default_rng(20240611).normal(size=(C_LAT, C_LAT)))[0]
BIT_MIX = _MIX  # (8, 8) orthogonal, rows index sub-cells
EMPTY_FEAT = (-np.ones(C_LAT) @ BIT_MIX).astype(np.float32)


@dataclass
class SparseLatent:
    """Active voxel indices in the D_LAT^3 grid and their features."""

    positions: np.ndarray  # (L, 3) int
    feats: np.ndarray  # (L, C)

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64).reshape(-1, 3)
        feats = np.asarray(self.feats, dtype=np.float32)
        width = feats.shape[-1] if feats.ndim == 2 else C_LAT
        self.feats = feats.reshape(len(self.positions), width if feats.size == 0 else -1)

    def __len__(self) -> int:
        return len(self.positions)

    def validate(self, res: int = D_LAT) -> None:
        if len(self) < 1:
            raise ValueError("sparse latent needs at least one active voxel")
        if self.positions.min() < 0 or self.positions.max() >= res:
            raise ValueError("latent voxel index out of range")
        flat = np.ravel_multi_index(self.positions.T, (res,) * 3)
        if len(np.unique(flat)) != len(flat):
            raise ValueError("duplicate latent voxel index")

    def to_dense(self, res: int = D_LAT) -> np.ndarray:
        grid = np.broadcast_to(EMPTY_FEAT, (res, res, res, self.feats.shape[1])).copy()
        if len(self):
            grid[tuple(self.positions.T)] = self.feats
        return grid

    @classmethod
    def from_dense(cls, grid: np.ndarray, active: np.ndarray | None = None) -> "SparseLatent":
        if active is None:
            active = ~np.all(np.isclose(grid, EMPTY_FEAT, atol=1e-6), axis=-1)
        pos = np.argwhere(active)
        return cls(pos, grid[tuple(pos.T)])

    def __eq__(self, other) -> bool:
        return (isinstance(other, SparseLatent) and np.array_equal(self.positions, other.positions)
                and np.array_equal(self.feats, other.feats))


def fine_to_bits(occ: np.ndarray) -> np.ndarray:
    """(2D)^3 occupancy -> (D, D, D, 8) sub-cell bits, sub-cell order (dx, dy, dz)."""
    D = occ.shape[0] // 2
    b = np.asarray(occ, bool).reshape(D, 2, D, 2, D, 2)
    return b.transpose(0, 2, 4, 1, 3, 5).reshape(D, D, D, 8)


def bits_to_fine(bits: np.ndarray) -> np.ndarray:
    D = bits.shape[0]
    b = np.asarray(bits).reshape(D, D, D, 2, 2, 2)
    return b.transpose(0, 3, 1, 4, 2, 5).reshape(2 * D, 2 * D, 2 * D)


def encode_occupancy(occ: np.ndarray) -> SparseLatent:
    """Canonical fine occupancy -> sparse latent (active = any occupied sub-cell)."""
    bits = fine_to_bits(occ)
    dense = (2.0 * bits - 1.0) @ BIT_MIX
    return SparseLatent.from_dense(dense.astype(np.float32), bits.any(axis=-1))


def decode_exact(latent: SparseLatent | np.ndarray) -> np.ndarray:
    """Invert the fixed encoding (ground-truth geometry, not the learned decoder)."""
    dense = latent.to_dense() if isinstance(latent, SparseLatent) else latent
    bits = (np.asarray(dense, dtype=np.float64) @ BIT_MIX.T) > 0
    return bits_to_fine(bits)
