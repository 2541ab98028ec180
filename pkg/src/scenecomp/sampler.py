"""Euler sampling of the learned velocity field with classifier-free guidance."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import geomath as gm
from . import numerics as nx
from .encoders import FeatureBundle
from .geomath import Pose8
from .heads import StructureDecoder, assemble_poses, decode_structure
from .latents import BIT_MIX, SparseLatent, decode_exact
from .model import SceneModel
from .numerics import Tensor


class SamplingError(FloatingPointError):
    pass


@dataclass
class SampleConfig:
    steps: int = 25
    cfg_weight: float = 5.0
    seed: int = 0
    fusion: str = "pose"  # multi-view: "pose" (reference-view latents) or "velocity"
    reference_view: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_weight < 0:
            raise ValueError("cfg_weight must be >= 0")
        if self.fusion not in ("pose", "velocity"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class SceneResult(NamedTuple):
    dense: np.ndarray  # (N, D, D, D, C) final latents
    pose_vectors: np.ndarray  # (N-1, 8) non-query poses
    poses: list  # N Pose8, query first-class identity
    latents: list  # N SparseLatent
    view_pose_vectors: np.ndarray | None = None  # (K, N-1, 8) per-view predictions, multi-view only


def cfg_velocity(v_cond, v_uncond, w: float):
    return v_uncond + w * (v_cond - v_uncond)


def initial_noise(n_assets: int, model: SceneModel, seed: int) -> np.ndarray:
    c = model.cfg
    shape = (n_assets, c.latent_res, c.latent_res, c.latent_res, c.latent_channels)
    return np.random.default_rng(seed).standard_normal(shape)


def _tile(bundle: FeatureBundle, reps: int) -> FeatureBundle:
    rep = lambda x: Tensor(np.concatenate([x.data] * reps, axis=0))
    return FeatureBundle(rep(bundle.f_asset), rep(bundle.f_mask), rep(bundle.f_global_v), rep(bundle.f_global_geo))


def _guided(model: SceneModel, x: np.ndarray, t: float, bundle: FeatureBundle, w: float, query_index: int):
    """Guided velocity for a batch of B views sharing latent state x (B, N, ...), plus cond poses."""
    B = x.shape[0]
    if w == 1.0:
        out = model(x, np.full(B, t), bundle, query_index=query_index)
        return out.velocity.data.astype(np.float64), out.poses.data.astype(np.float64)
    both = _tile(bundle, 2)
    cond = np.r_[np.ones(B, bool), np.zeros(B, bool)]
    out = model(np.concatenate([x, x]), np.full(2 * B, t), both, cond=cond, query_index=query_index)
    v = out.velocity.data.astype(np.float64)
    return cfg_velocity(v[:B], v[B:], w), out.poses.data[:B].astype(np.float64)


def _to_latents(dense: np.ndarray, decoder: StructureDecoder | None) -> list[SparseLatent]:
    out = []
    for g in dense:
        if decoder is not None:
            out.append(decoder.to_sparse(g))
        else:
            active = ((g.astype(np.float64) @ BIT_MIX.T) > 0).any(axis=-1)
            out.append(SparseLatent.from_dense(g.astype(np.float32), active))
    return out


def _integrate(model, bundle, x, cfg: SampleConfig, query_index, fuse: str = "reference"):
    """Shared Euler loop over one latent state x (N, ...), evaluated under each of B view bundles.

    ``fuse`` picks the velocity that moves the state: the reference view's or the mean over views.
    Returns the final state and each view's conditional poses at the last evaluation.
    """
    B = bundle.f_asset.shape[0]
    dt_ = 1.0 / cfg.steps
    poses = None
    for k in range(cfg.steps):
        t = 1.0 - k * dt_
        v, poses = _guided(model, np.broadcast_to(x, (B,) + x.shape).copy(), t, bundle, cfg.cfg_weight,
                           query_index)
        v = v.mean(axis=0) if (fuse == "mean" and B > 1) else v[cfg.reference_view if B > 1 else 0]
        x = x - dt_ * v
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite latent state at step {k}")
    return x, poses


def sample_scene(model: SceneModel, bundle: FeatureBundle, cfg: SampleConfig | None = None,
                 decoder: StructureDecoder | None = None, query_index: int = 0, noise=None) -> SceneResult:
    """Generate one scene from a single-view bundle (batch axis of size 1)."""
    cfg = cfg or SampleConfig()
    N = bundle.f_asset.shape[1]
    x = initial_noise(N, model, cfg.seed) if noise is None else np.array(noise, dtype=np.float64)
    with nx.no_grad():
        x, poses = _integrate(model, bundle, x, cfg, query_index)
    pv = poses[0]
    return SceneResult(x, pv, assemble_poses(pv, N, query_index), _to_latents(x, decoder))


def encode_views(model: SceneModel, views, masks) -> FeatureBundle:
    """Per-view bundles (batch axis = view) with geometric streams from the joint K-view encoding."""
    dt = model.dtype
    views = np.asarray(views, dtype=dt)
    masks = np.asarray(masks, dtype=dt)
    K = views.shape[0]
    with nx.no_grad():
        f_asset = model.visual(views[:, None], masks)
        f_mask = model.visual.encode_mask(masks)
        C = f_asset.shape[-1]
        f_gv = nx.reshape(model.visual(views), (K, 1, -1, C))
        geo = model.geometric(views[None])  # (1, K, L, C)
        f_geo = nx.reshape(geo, (K, 1, -1, C))
    return FeatureBundle(f_asset, f_mask, f_gv, f_geo)


def average_poses(view_vecs: np.ndarray) -> np.ndarray:
    """(K, M, 8) per-view poses -> (M, 8): arithmetic mean of t and s, chordal mean of q."""
    view_vecs = np.asarray(view_vecs, dtype=np.float64)
    if view_vecs.shape[0] == 1:
        return view_vecs[0].copy()
    out = view_vecs.mean(axis=0)
    for j in range(view_vecs.shape[1]):
        out[j, 3:7] = gm.quat_mean(view_vecs[:, j, 3:7])
    return out


def sample_scene_multiview(model: SceneModel, views, masks, cfg: SampleConfig | None = None,
                           decoder: StructureDecoder | None = None, query_index: int = 0,
                           noise=None) -> SceneResult:
    """K views of one scene; masks (K, N, H, W) list assets in the same order in every view."""
    cfg = cfg or SampleConfig()
    if isinstance(masks, (list, tuple)):
        counts = {len(m) for m in masks}
        if len(counts) != 1:
            raise ValueError(f"views disagree on asset count: {sorted(counts)}")
    views, masks = np.asarray(views), np.asarray(masks)
    if views.ndim != 4 or masks.ndim != 4 or views.shape[0] != masks.shape[0]:
        raise ValueError("expected views (K, H, W, C) and masks (K, N, H, W)")
    K, N = masks.shape[:2]
    bundle = encode_views(model, views, masks)
    x = initial_noise(N, model, cfg.seed) if noise is None else np.array(noise, dtype=np.float64)
    with nx.no_grad():
        x, view_poses = _integrate(model, bundle, x, cfg, query_index,
                                   "mean" if cfg.fusion == "velocity" else "reference")
    pv = average_poses(view_poses)
    return SceneResult(x, pv, assemble_poses(pv, N, query_index), _to_latents(x, decoder), view_poses)



# -- output bundle -------------------------------------------------------------

def _digest(paths) -> str:
    h = hashlib.sha256()
    for p in sorted(paths, key=lambda p: p.name):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_scene_bundle(result: SceneResult, out_dir, decoder: StructureDecoder | None = None,
                       config: dict | None = None) -> Path:
    """Per-asset canonical and posed surface clouds, occupancy grids, poses.json and a manifest.

    Posed clouds live in the query asset's frame. Without a decoder the
    occupancy comes from the sign of the unmixed latent bits.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (lat, pose) in enumerate(zip(result.latents, result.poses)):
        if decoder is not None:
            grid, pts = decode_structure(lat, decoder)
        else:
            occ = decode_exact(lat)
            grid, pts = gm.VoxelGrid(occ, -1.0, 1.0), gm.surface_points(occ)
        for name, write, payload in [(f"asset_{i:02d}.ply", gm.write_ply, pts),
                                     (f"asset_{i:02d}_posed.ply", gm.write_ply, gm.apply_pose(pts, pose)),
                                     (f"asset_{i:02d}.vox", gm.write_voxels_rle, grid)]:
            write(out / name, payload)
            files.append(out / name)
    poses = out / "poses.json"
    poses.write_text(json.dumps([p.to_json() for p in result.poses], indent=1))
    files.append(poses)
    manifest = {"n_assets": len(result.poses), "config": config or {},
                "files": sorted(p.name for p in files), "content_sha256": _digest(files)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


def read_scene_poses(out_dir) -> list[Pose8]:
    return [Pose8.from_json(d) for d in json.loads((Path(out_dir) / "poses.json").read_text())]
