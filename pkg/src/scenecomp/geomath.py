"""Quaternions, similarity poses, voxel grids and point-cloud helpers.

Quaternions are scalar-first ``[w, x, y, z]``. A :class:`Pose8` maps a point
``p`` to ``s * R(q) @ p + t``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDENTITY_Q = np.array([1.0, 0.0, 0.0, 0.0])


# -- quaternions -------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero quaternion cannot be normalized")
    return q / n


def quat_mul(a, b) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = quat_normalize(q)
    return q if q[0] >= 0 else -q


def quat_angle(a, b) -> float:
    """Rotation angle (radians) between the rotations encoded by ``a`` and ``b``."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * np.arccos(min(1.0, d))


def quat_mean(quats) -> np.ndarray:
    """Chordal L2 mean: principal eigenvector of sum(q q^T), scalar part >= 0."""
    Q = np.atleast_2d(np.asarray(quats, dtype=np.float64))
    if Q.size == 0:
        raise ValueError("quat_mean of an empty list")
    Q = quat_normalize(Q)
    _, vecs = np.linalg.eigh(Q.T @ Q)
    q = vecs[:, -1]
    if q[0] < 0 or (q[0] == 0 and q[np.argmax(np.abs(q))] < 0):
        q = -q
    return q / np.linalg.norm(q)


def rotation_angle_between(Ra, Rb) -> float:
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# -- poses -------------------------------------------------------------------

@dataclass
class Pose8:
    """Translation, unit quaternion and uniform scale; flattens to 8 numbers."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: IDENTITY_Q.copy())
    s: float = 1.0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.q = quat_normalize(np.asarray(self.q, dtype=np.float64).reshape(4))
        self.s = float(self.s)
        if not self.s > 0:
            raise ValueError(f"pose scale must be positive, got {self.s}")

    @classmethod
    def identity(cls) -> "Pose8":
        return cls()

    @classmethod
    def from_vector(cls, v) -> "Pose8":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:7], v[7])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.q, [self.s]])

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def inverse(self) -> "Pose8":
        Rt = self.R.T
        return Pose8(-(Rt @ self.t) / self.s, quat_conj(self.q), 1.0 / self.s)

    def compose(self, other: "Pose8") -> "Pose8":
        """self ∘ other: apply ``other`` first."""
        t = self.s * (self.R @ other.t) + self.t
        return Pose8(t, quat_mul(self.q, other.q), self.s * other.s)

    def is_identity(self, tol: float = 1e-12) -> bool:
        return (np.allclose(self.t, 0, atol=tol) and quat_angle(self.q, IDENTITY_Q) <= max(tol, 1e-7)
                and abs(self.s - 1) <= tol)

    def to_json(self) -> dict:
        return {"t": self.t.tolist(), "q": self.q.tolist(), "s": self.s}

    @classmethod
    def from_json(cls, d: dict) -> "Pose8":
        return cls(d["t"], d["q"], d["s"])


def apply_pose(points, pose: Pose8) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return pose.s * pts @ pose.R.T + pose.t


def relative_pose(query_world: Pose8, asset_world: Pose8) -> Pose8:
    """Pose of an asset expressed in the query asset's frame."""
    return query_world.inverse().compose(asset_world)


# -- voxel grids -------------------------------------------------------------

@dataclass
class VoxelGrid:
    counts: np.ndarray
    lo: float = -1.0
    hi: float = 1.0

    @property
    def resolution(self) -> int:
        return self.counts.shape[0]

    @property
    def cell(self) -> float:
        return (self.hi - self.lo) / self.resolution

    def occupied(self) -> np.ndarray:
        return self.counts > 0


def cell_index(points, res: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Integer cell coordinates, clamped into the grid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.floor((pts - lo) / (hi - lo) * res).astype(np.int64)
    return np.clip(idx, 0, res - 1)


def voxelize_surface(clouds, grid_res: int = 64, lo: float = -1.0, hi: float = 1.0) -> VoxelGrid:
    """Per-cell count of distinct assets with at least one point in the cell."""
    if grid_res < 2:
        raise ValueError("grid_res must be >= 2")
    if isinstance(clouds, np.ndarray) and clouds.ndim == 2:
        clouds = [clouds]
    counts = np.zeros(grid_res ** 3, dtype=np.int32)
    for pc in clouds:
        if len(pc) == 0:
            continue
        idx = cell_index(pc, grid_res, lo, hi)
        flat = np.unique((idx[:, 0] * grid_res + idx[:, 1]) * grid_res + idx[:, 2])
        counts[flat] += 1
    return VoxelGrid(counts.reshape((grid_res,) * 3), lo, hi)


def collision_iou(grid: VoxelGrid) -> float:
    """Share of occupied cells claimed by more than one asset."""
    occ = int(np.count_nonzero(grid.counts > 0))
    if occ == 0:
        return 0.0
    return int(np.count_nonzero(grid.counts > 1)) / occ


def bbox_iou(a, b, floor: float = 1e-12) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("bbox_iou needs non-empty clouds")
    alo, ahi = a.min(0), a.max(0)
    blo, bhi = b.min(0), b.max(0)
    inter = np.prod(np.clip(np.minimum(ahi, bhi) - np.maximum(alo, blo), 0, None))
    va = max(np.prod(ahi - alo), floor)
    vb = max(np.prod(bhi - blo), floor)
    return float(min(1.0, inter / (va + vb - inter)))


# -- occupancy <-> surface points --------------------------------------------

def surface_mask(occ: np.ndarray) -> np.ndarray:
    """Occupied cells with at least one empty (or out-of-grid) 6-neighbour."""
    occ = np.asarray(occ, dtype=bool)
    pad = np.pad(occ, 1, constant_values=False)
    interior = (pad[2:, 1:-1, 1:-1] & pad[:-2, 1:-1, 1:-1] & pad[1:-1, 2:, 1:-1]
                & pad[1:-1, :-2, 1:-1] & pad[1:-1, 1:-1, 2:] & pad[1:-1, 1:-1, :-2])
    return occ & ~interior


def cell_centers(idx: np.ndarray, res: int, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return lo + (np.asarray(idx, dtype=np.float64) + 0.5) * (hi - lo) / res


def surface_points(occ: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Centroids of surface cells of an occupancy grid spanning [lo, hi]^3."""
    idx = np.argwhere(surface_mask(occ))
    return cell_centers(idx, occ.shape[0], lo, hi)


_FACE_DIRS = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]])


def sample_surface(occ: np.ndarray, n: int, rng: np.random.Generator,
                   lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Uniform samples on the exposed voxel faces of an occupancy grid."""
    occ = np.asarray(occ, dtype=bool)
    res = occ.shape[0]
    pad = np.pad(occ, 1, constant_values=False)
    cells, dirs = [], []
    for k, d in enumerate(_FACE_DIRS):
        nb = pad[1 + d[0]:res + 1 + d[0], 1 + d[1]:res + 1 + d[1], 1 + d[2]:res + 1 + d[2]]
        c = np.argwhere(occ & ~nb)
        cells.append(c)
        dirs.append(np.full(len(c), k))
    cells = np.concatenate(cells) if cells else np.zeros((0, 3), int)
    dirs = np.concatenate(dirs) if dirs else np.zeros(0, int)
    if len(cells) == 0:
        return np.zeros((0, 3))
    pick = rng.integers(0, len(cells), size=n)
    uv = rng.random((n, 3))
    d = _FACE_DIRS[dirs[pick]]
    # on the face: the coordinate along the normal sits at 0 or 1
    local = np.where(d != 0, (d > 0).astype(float), uv)
    return lo + (cells[pick] + local) * (hi - lo) / res


# -- file formats ------------------------------------------------------------

def write_ply(path, points) -> None:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(pts)}",
             "property double x", "property double y", "property double z", "end_header"]
    body = "\n".join(" ".join(repr(float(c)) for c in p) for p in pts)
    Path(path).write_text("\n".join(lines) + "\n" + body + ("\n" if len(pts) else ""))


def read_ply(path) -> np.ndarray:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n, i = 0, 1
    while text[i].strip() != "end_header":
        parts = text[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        if parts[:2] == ["format", "binary_little_endian"]:
            raise ValueError("only ASCII PLY is supported")
        i += 1
    rows = [list(map(float, line.split()[:3])) for line in text[i + 1:i + 1 + n]]
    return np.asarray(rows, dtype=np.float64).reshape(n, 3)


_RLE_MAGIC = b"SVOX"


def write_voxels_rle(path, grid: VoxelGrid) -> None:
    """Run-length encoded uint8 counts: header then (value u8, run u32) pairs."""
    flat = np.asarray(grid.counts).reshape(-1)
    if flat.max(initial=0) > 255:
        raise ValueError("counts above 255 do not fit the RLE format")
    flat = flat.astype(np.uint8)
    change = np.flatnonzero(np.diff(flat)) + 1
    starts = np.concatenate([[0], change])
    runs = np.diff(np.concatenate([starts, [flat.size]]))
    with open(path, "wb") as fh:
        fh.write(_RLE_MAGIC)
        fh.write(struct.pack("<IIddI", 1, grid.resolution, grid.lo, grid.hi, len(starts)))
        rec = np.zeros(len(starts), dtype=[("v", "<u1"), ("n", "<u4")])
        rec["v"], rec["n"] = flat[starts], runs
        fh.write(rec.tobytes())


def read_voxels_rle(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    if raw[:4] != _RLE_MAGIC:
        raise ValueError(f"{path}: bad voxel magic")
    version, res, lo, hi, nruns = struct.unpack_from("<IIddI", raw, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported voxel version {version}")
    rec = np.frombuffer(raw, dtype=[("v", "<u1"), ("n", "<u4")], count=nruns, offset=4 + 28)
    flat = np.repeat(rec["v"], rec["n"].astype(np.int64))
    if flat.size != res ** 3:
        raise ValueError(f"{path}: run lengths do not cover the grid")
    return VoxelGrid(flat.reshape((res,) * 3).astype(np.int32), lo, hi)
