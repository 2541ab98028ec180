"""Procedural multi-asset scenes, query-rotation augmentation, corpus files."""
from __future__ import annotations

import array
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from . import geomath as gm
from .geomath import Pose8
from .latents import FINE_RES, SparseLatent, decode_exact, encode_occupancy

MAX_ASSETS = 7
VIEW_RES = 32
VIEW_CHANNELS = 3  # silhouette, depth, albedo
SHAPE_KINDS = ("box", "sphere", "cylinder", "lshape", "table")
COLLISION_RES = 64
MAX_LAYOUT_ATTEMPTS = 1000


class GenerationError(RuntimeError):
    pass


class CorpusFormatError(ValueError):
    pass


# -- assets ------------------------------------------------------------------

@dataclass
class AssetSpec:
    kind: str
    params: dict
    occupancy: np.ndarray  # (FINE_RES,)*3 bool, canonical frame [-1, 1]^3

    def surface(self) -> np.ndarray:
        return gm.surface_points(self.occupancy)


def _fine_centers(res: int = FINE_RES) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = -1.0 + (np.arange(res) + 0.5) * 2.0 / res
    return np.meshgrid(c, c, c, indexing="ij")


def _box(x, y, z, lo, hi):
    return (x >= lo[0]) & (x <= hi[0]) & (y >= lo[1]) & (y <= hi[1]) & (z >= lo[2]) & (z <= hi[2])


def make_asset(kind: str, rng: np.random.Generator) -> AssetSpec:
    """Random shape of ``kind`` whose largest half-extent is 1."""
    x, y, z = _fine_centers()
    if kind == "box":
        e = rng.uniform(0.35, 1.0, 3)
        e[rng.integers(3)] = 1.0
        occ = _box(x, y, z, -e, e)
        params = {"half_extents": e.tolist()}
    elif kind == "sphere":
        r = rng.uniform(0.5, 1.0, 3)
        r[rng.integers(3)] = 1.0
        occ = (x / r[0]) ** 2 + (y / r[1]) ** 2 + (z / r[2]) ** 2 <= 1.0
        params = {"radii": r.tolist()}
    elif kind == "cylinder":
        r, h = rng.uniform(0.35, 1.0, 2)
        if rng.random() < 0.5:
            r = 1.0
        else:
            h = 1.0
        occ = (x ** 2 + y ** 2 <= r * r) & (np.abs(z) <= h)
        params = {"radius": float(r), "half_height": float(h)}
    elif kind == "lshape":
        t = rng.uniform(0.35, 0.6)
        d = rng.uniform(0.4, 1.0)
        occ = _box(x, y, z, [-1, -d, -1], [1, d, -1 + 2 * t]) | _box(x, y, z, [-1, -d, -1], [-1 + 2 * t, d, 1])
        params = {"thickness": float(t), "depth": float(d)}
    elif kind == "table":
        w = rng.uniform(0.5, 1.0)
        top = rng.uniform(0.15, 0.3)
        leg = rng.uniform(0.18, 0.3)
        occ = _box(x, y, z, [-1, -w, 1 - top], [1, w, 1])
        for sx in (-1, 1):
            for sy in (-1, 1):
                cx, cy = sx * (1 - leg), sy * (w - leg)
                occ |= _box(x, y, z, [cx - leg, cy - leg, -1], [cx + leg, cy + leg, 1])
        params = {"width": float(w), "top": float(top), "leg": float(leg)}
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return AssetSpec(kind, params, occ)


# -- scene sample ------------------------------------------------------------

@dataclass
class SceneSample:
    views: np.ndarray  # (K, H, W, 3) float32
    masks: np.ndarray  # (K, N, H, W) bool
    gt_latents: list[SparseLatent]
    gt_poses: list[Pose8]  # relative to asset 0
    d_scene: float
    world_poses: list[Pose8] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)
    seed: int = -1

    @property
    def n_assets(self) -> int:
        return len(self.gt_poses)

    @property
    def n_views(self) -> int:
        return self.views.shape[0]

    def occupancies(self) -> list[np.ndarray]:
        return [decode_exact(lat) for lat in self.gt_latents]

    def dense_latents(self) -> np.ndarray:
        return np.stack([lat.to_dense() for lat in self.gt_latents])

    def __eq__(self, other) -> bool:
        if not isinstance(other, SceneSample):
            return NotImplemented
        return (np.array_equal(self.views, other.views) and np.array_equal(self.masks, other.masks)
                and self.gt_latents == other.gt_latents and self.d_scene == other.d_scene
                and len(self.gt_poses) == len(other.gt_poses)
                and all(np.array_equal(a.to_vector(), b.to_vector()) for a, b in zip(self.gt_poses, other.gt_poses))
                and all(np.array_equal(a.to_vector(), b.to_vector())
                        for a, b in zip(self.world_poses, other.world_poses))
                and self.kinds == other.kinds and self.seed == other.seed)


def scene_diameter(surfaces: list[np.ndarray], poses: list[Pose8]) -> float:
    pts = np.concatenate([gm.apply_pose(p, P) for p, P in zip(surfaces, poses)])
    return float(np.linalg.norm(pts.max(0) - pts.min(0)))


def scene_collision_iou(surfaces, poses, d_scene, res: int = COLLISION_RES) -> float:
    posed = [gm.apply_pose(p, P) for p, P in zip(surfaces, poses)]
    return gm.collision_iou(gm.voxelize_surface(posed, res, -d_scene, d_scene))


def _yaw_quat(theta: float) -> np.ndarray:
    return gm.quat_from_axis_angle([0.0, 0.0, 1.0], theta)


def _place(assets: list[AssetSpec], rng: np.random.Generator, policy: str) -> list[Pose8]:
    """Non-overlapping world poses on the z=0 floor, by rejection sampling."""
    n = len(assets)
    radius = 0.8 + 0.55 * n
    gap = 0.12
    attempts = 0
    placed: list[Pose8] = []
    boxes: list[tuple[np.ndarray, np.ndarray]] = []
    for k, asset in enumerate(assets):
        surf = asset.surface()
        while True:
            attempts += 1
            if attempts > MAX_LAYOUT_ATTEMPTS:
                raise GenerationError(f"layout rejected {MAX_LAYOUT_ATTEMPTS} times")
            s = rng.uniform(0.45, 0.95)
            q = _yaw_quat(rng.uniform(0, 2 * np.pi))
            if policy == "scatter":
                xy = rng.uniform(-radius, radius, 2)
            elif policy == "row":
                xy = np.array([(k - (n - 1) / 2) * 2.1 + rng.normal(0, 0.15), rng.normal(0, 0.3)])
            else:
                raise ValueError(f"unknown layout policy {policy!r}")
            rot = gm.apply_pose(surf, Pose8(np.zeros(3), q, s))
            t = np.array([xy[0], xy[1], -rot[:, 2].min()])
            pts = rot + t
            lo, hi = pts.min(0), pts.max(0)
            ok = all(np.any((lo[:2] > bhi[:2] + gap) | (hi[:2] < blo[:2] - gap)) for blo, bhi in boxes)
            if ok:
                placed.append(Pose8(t, q, s))
                boxes.append((lo, hi))
                break
    return placed


def _camera(rng: np.random.Generator) -> np.ndarray:
    """Rows: right, up, forward (view direction, pointing into the scene)."""
    az = rng.uniform(0, 2 * np.pi)
    el = np.deg2rad(rng.uniform(25, 60))
    fwd = -np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return np.stack([right, up, fwd])


def render_frame(points: np.ndarray, cam: np.ndarray) -> tuple[np.ndarray, float]:
    """Image-plane (centre, half-width) that fits ``points`` seen by ``cam`` with a small margin."""
    uv = points @ cam[:2].T
    return (uv.max(0) + uv.min(0)) / 2, float((uv.max(0) - uv.min(0)).max() / 2 * 1.08)


def orbit_cameras(n: int, elevation_deg: float = 35.0) -> list[np.ndarray]:
    """n cameras evenly spaced in azimuth at a fixed elevation."""
    el = np.deg2rad(elevation_deg)
    cams = []
    for az in np.linspace(0, 2 * np.pi, n, endpoint=False):
        fwd = -np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        cams.append(np.stack([right, np.cross(right, fwd), fwd]))
    return cams


def render_views(clouds: list[np.ndarray], albedo: np.ndarray, cameras: list[np.ndarray],
                 res: int = VIEW_RES, frames=None) -> tuple[np.ndarray, np.ndarray]:
    """Orthographic z-buffered point splatting of world-space asset clouds.

    ``frames`` optionally fixes each camera's (centre, half-width); by default
    every view is framed to fit the clouds.
    """
    allpts = np.concatenate(clouds)
    ids = np.concatenate([np.full(len(c), i) for i, c in enumerate(clouds)])
    views = np.zeros((len(cameras), res, res, VIEW_CHANNELS), dtype=np.float32)
    masks = np.zeros((len(cameras), len(clouds), res, res), dtype=bool)
    for k, cam in enumerate(cameras):
        uvd = allpts @ cam.T
        center, half = frames[k] if frames is not None else render_frame(allpts, cam)
        px = np.floor((uvd[:, :2] - center + half) / (2 * half) * res).astype(int)
        px = np.clip(px, 0, res - 1)
        col, row = px[:, 0], res - 1 - px[:, 1]
        depth = uvd[:, 2]
        # nearest point per pixel: sort by depth descending so the last write wins
        order = np.argsort(-depth, kind="stable")
        flat = row[order] * res + col[order]
        zbuf = np.full(res * res, np.inf)
        owner = np.full(res * res, -1)
        zbuf[flat] = depth[order]
        owner[flat] = ids[order]
        hit = owner >= 0
        dmin, dmax = zbuf[hit].min(), zbuf[hit].max()
        dn = np.zeros(res * res)
        dn[hit] = 1.0 - 0.8 * (zbuf[hit] - dmin) / max(dmax - dmin, 1e-9)
        alb = np.zeros(res * res)
        alb[hit] = albedo[owner[hit]]
        views[k, ..., 0] = hit.reshape(res, res)
        views[k, ..., 1] = dn.reshape(res, res)
        views[k, ..., 2] = alb.reshape(res, res)
        for i in range(len(clouds)):
            masks[k, i] = (owner == i).reshape(res, res)
    return views, masks


def _dense_cloud(occ: np.ndarray) -> np.ndarray:
    """Surface cell centres plus half-cell offsets: dense enough to splat without holes."""
    base = gm.surface_points(occ)
    h = 0.5 / occ.shape[0]
    offs = np.array([[dx, dy, dz] for dx in (-h, h) for dy in (-h, h) for dz in (-h, h)])
    return (base[:, None, :] + offs[None]).reshape(-1, 3)


def generate_scene(rng_seed: int, n_assets: int, layout_policy: str = "scatter",
                   n_views: int = 1, max_retries: int = 20) -> SceneSample:
    """Deterministic scene from a seed; poses relative to asset 0."""
    if not 1 <= n_assets <= MAX_ASSETS:
        raise ValueError(f"n_assets must be in [1, {MAX_ASSETS}]")
    if n_views < 1:
        raise ValueError("need at least one view")
    rng = np.random.default_rng([rng_seed, n_assets, 7])
    for _ in range(max_retries + 1):
        assets = [make_asset(SHAPE_KINDS[rng.integers(len(SHAPE_KINDS))], rng) for _ in range(n_assets)]
        try:
            world = _place(assets, rng, layout_policy)
        except GenerationError:
            if max_retries:
                continue
            raise
        surfaces = [a.surface() for a in assets]
        rel = [gm.relative_pose(world[0], w) for w in world]
        rel[0] = Pose8.identity()
        d_scene = scene_diameter(surfaces, rel)
        if scene_collision_iou(surfaces, rel, d_scene) > 0:
            if max_retries:
                continue
            raise GenerationError("placement collides on the collision grid")
        break
    else:
        raise GenerationError("no valid layout within retry budget")
    albedo = rng.uniform(0.3, 1.0, n_assets)
    cameras = [_camera(rng) for _ in range(n_views)]
    clouds = [gm.apply_pose(_dense_cloud(a.occupancy), w) for a, w in zip(assets, world)]
    views, masks = render_views(clouds, albedo, cameras)
    return SceneSample(views=views, masks=masks, gt_latents=[encode_occupancy(a.occupancy) for a in assets],
                       gt_poses=rel, d_scene=d_scene, world_poses=world, kinds=[a.kind for a in assets],
                       seed=int(rng_seed))


def generate_corpus(seed: int, n_scenes: int, min_assets: int = 1, max_assets: int = MAX_ASSETS,
                    n_views: int = 1, layout_policy: str = "scatter") -> Iterator[SceneSample]:
    rng = np.random.default_rng(seed)
    for i in range(n_scenes):
        n = int(rng.integers(min_assets, max_assets + 1))
        yield generate_scene(seed * 1_000_003 + i, n, layout_policy, n_views)


# -- augmentation ------------------------------------------------------------

def augment_query_rotation(s: SceneSample, rng: np.random.Generator | None = None) -> list[SceneSample]:
    """One sample per asset, each with that asset promoted to the query slot."""
    rng = rng if rng is not None else np.random.default_rng(s.seed)
    n = s.n_assets
    if n == 1:
        return [s]
    surfaces = [gm.surface_points(o) for o in s.occupancies()]
    out = []
    for j in range(n):
        rest = [i for i in range(n) if i != j]
        order = [j] + [rest[k] for k in rng.permutation(len(rest))]
        inv = s.gt_poses[j].inverse()
        poses = [Pose8.identity()] + [inv.compose(s.gt_poses[i]) for i in order[1:]]
        out.append(SceneSample(
            views=s.views, masks=s.masks[:, order], gt_latents=[s.gt_latents[i] for i in order],
            gt_poses=poses, d_scene=scene_diameter([surfaces[i] for i in order], poses),
            world_poses=[s.world_poses[i] for i in order] if s.world_poses else [],
            kinds=[s.kinds[i] for i in order] if s.kinds else [], seed=s.seed))
    return out


# -- corpus files ------------------------------------------------------------
# header: b"SGEN" u32 version u64 count u64 index_offset
# blocks: u32 json_len, json, raw arrays; index: count x (u64 offset, u64 length)

CORPUS_MAGIC = b"SGEN"
CORPUS_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")


def _pack_sample(s: SceneSample) -> bytes:
    arrays = {"views": s.views.astype("<f4"), "masks": np.packbits(s.masks, axis=None)}
    for i, lat in enumerate(s.gt_latents):
        arrays[f"lat{i}.pos"] = lat.positions.astype("<i2")
        arrays[f"lat{i}.feat"] = lat.feats.astype("<f4")
    arrays["poses"] = np.stack([p.to_vector() for p in s.gt_poses]).astype("<f8")
    if s.world_poses:
        arrays["world"] = np.stack([p.to_vector() for p in s.world_poses]).astype("<f8")
    entries, buf, off = [], io.BytesIO(), 0
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append([name, arr.dtype.str, list(arr.shape), off])
        buf.write(raw)
        off += len(raw)
    meta = {"arrays": entries, "mask_shape": list(s.masks.shape), "d_scene": repr(s.d_scene),
            "kinds": s.kinds, "seed": s.seed, "n": s.n_assets}
    head = json.dumps(meta, separators=(",", ":")).encode()
    return struct.pack("<I", len(head)) + head + buf.getvalue()


def _unpack_sample(raw: bytes) -> SceneSample:
    (hlen,) = struct.unpack_from("<I", raw, 0)
    try:
        meta = json.loads(raw[4:4 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CorpusFormatError("corrupt sample block") from exc
    base = 4 + hlen
    arrays = {}
    for name, dt, shape, off in meta["arrays"]:
        dt = np.dtype(dt)
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(raw, dtype=dt, count=count, offset=base + off).reshape(shape).copy()
    mshape = tuple(meta["mask_shape"])
    masks = np.unpackbits(arrays["masks"], count=int(np.prod(mshape))).astype(bool).reshape(mshape)
    n = meta["n"]
    lats = [SparseLatent(arrays[f"lat{i}.pos"].astype(np.int64), arrays[f"lat{i}.feat"]) for i in range(n)]
    poses = [Pose8.from_vector(v) for v in arrays["poses"]]
    world = [Pose8.from_vector(v) for v in arrays["world"]] if "world" in arrays else []
    return SceneSample(views=arrays["views"].astype(np.float32), masks=masks, gt_latents=lats, gt_poses=poses,
                       d_scene=float(meta["d_scene"]), world_poses=world, kinds=meta["kinds"], seed=meta["seed"])


class CorpusWriter:
    """Streaming writer; the index is appended and the header patched on close."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, 0, 0))
        self._index = array.array("Q")  # flat (offset, length) pairs, 16 bytes per sample

    def add(self, sample: SceneSample) -> None:
        raw = _pack_sample(sample)
        self._index.extend((self._fh.tell(), len(raw)))
        self._fh.write(raw)

    def close(self) -> None:
        if self._fh.closed:
            return
        index_off = self._fh.tell()
        self._fh.write(np.frombuffer(self._index, dtype=np.uint64).astype("<u8").tobytes())
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, len(self._index) // 2, index_off))
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class CorpusReader:
    """Random access over a corpus file without loading every sample."""

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise CorpusFormatError(f"{path}: truncated header")
            magic, version, count, index_off = _HEADER.unpack(head)
            if magic != CORPUS_MAGIC:
                raise CorpusFormatError(f"{path}: bad magic {magic!r}")
            if version != CORPUS_VERSION:
                raise CorpusFormatError(f"{path}: version {version}, expected {CORPUS_VERSION}")
            fh.seek(index_off)
            idx = np.frombuffer(fh.read(16 * count), dtype="<u8")
        if idx.size != 2 * count:
            raise CorpusFormatError(f"{path}: truncated index")
        self._index = idx.reshape(count, 2)

    def __len__(self) -> int:
        return len(self._index)

    def __getitem__(self, i: int) -> SceneSample:
        off, length = (int(v) for v in self._index[i])
        with open(self.path, "rb") as fh:
            fh.seek(off)
            return _unpack_sample(fh.read(length))

    def __iter__(self) -> Iterator[SceneSample]:
        with open(self.path, "rb") as fh:
            for off, length in self._index:
                fh.seek(int(off))
                yield _unpack_sample(fh.read(int(length)))

    def asset_counts(self) -> list[int]:
        """Asset count per sample, reading only block headers."""
        out = []
        with open(self.path, "rb") as fh:
            for off, _ in self._index:
                fh.seek(int(off))
                (hlen,) = struct.unpack("<I", fh.read(4))
                out.append(json.loads(fh.read(hlen))["n"])
        return out


def write_corpus(samples: Iterable[SceneSample], path) -> int:
    n = 0
    with CorpusWriter(path) as w:
        for s in samples:
            w.add(s)
            n += 1
    return n


def read_corpus(path) -> list[SceneSample]:
    return list(CorpusReader(path))
