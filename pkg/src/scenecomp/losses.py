"""Training objectives: flow matching, relative pose, and surface collision."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import geomath as gm
from . import numerics as nx
from .numerics import Tensor

DELTA_P = 0.02
DELTA_C = 0.05
LAMBDA_MIN, LAMBDA_MAX, LAMBDA_DECAY = 0.2, 1.0, 0.99


# -- flow matching -----------------------------------------------------------

def cfm_loss(v_hat, x0, eps) -> Tensor:
    """Mean over assets of the per-asset mean squared error to the target velocity eps - x0.

    Accepts per-asset lists or stacked arrays whose leading axes index assets.
    """
    if isinstance(v_hat, (list, tuple)):
        if not (len(v_hat) == len(x0) == len(eps)) or not v_hat:
            raise ValueError("cfm_loss needs equal, non-empty asset lists")
        terms = [nx.mean((nx.as_tensor(v) - (np.asarray(e) - np.asarray(x))) ** 2)
                 for v, x, e in zip(v_hat, x0, eps)]
        return nx.tsum(nx.stack(terms)) / len(terms)
    v_hat = nx.as_tensor(v_hat)
    target = np.asarray(eps) - np.asarray(x0)
    if target.shape != v_hat.shape:
        raise ValueError(f"velocity shape {v_hat.shape} vs target {target.shape}")
    return nx.mean((v_hat - target.astype(v_hat.dtype)) ** 2)


# -- robust penalties --------------------------------------------------------

def huber(x, delta: float) -> Tensor:
    """Summed threshold-continuous Huber: e^2 / (2 delta) inside |e| <= delta, |e| - delta/2 outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    x = nx.as_tensor(x)
    a = nx.absolute(x)
    inside = a.data <= delta
    quad = x * x * (0.5 / delta)
    lin = a - 0.5 * delta
    return nx.tsum(nx.where(inside, quad, lin))


def _gt_vectors(gt, like_shape) -> np.ndarray:
    if isinstance(gt, (list, tuple)) and gt and isinstance(gt[0], gm.Pose8):
        gt = np.stack([p.to_vector() for p in gt])
    return np.asarray(gt, dtype=np.float64).reshape(like_shape)


def position_loss(pred, gt, d_scene, mu=(1.0, 1.0, 1.0), delta: float = DELTA_P) -> Tensor:
    """Sum over non-query assets of mu-weighted Huber terms on t / d_scene, q and s.

    pred: (..., M, 8) tensor or list of Pose8; gt likewise; d_scene scalar or per-scene (...,).
    Batched inputs are averaged over the leading (scene) axes.
    """
    if isinstance(pred, (list, tuple)):
        pred = np.stack([p.to_vector() for p in pred]) if pred else np.zeros((0, 8))
    pred = nx.as_tensor(pred)
    if pred.shape[-2] == 0:
        return nx.Tensor(np.zeros((), dtype=pred.dtype))
    g = _gt_vectors(gt, pred.shape)
    qp = pred.data[..., 3:7]
    qg = g[..., 3:7]
    flip = np.sum((qp - qg) ** 2, -1) > np.sum((qp + qg) ** 2, -1)
    g = g.copy()
    g[..., 3:7] = np.where(flip[..., None], -qg, qg)
    g = g.astype(pred.dtype)

    d = np.asarray(d_scene, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("d_scene must be positive")
    d = d.reshape(d.shape + (1,) * (pred.ndim - d.ndim)).astype(pred.dtype)
    et, eq, es = nx.split(pred - g, [3, 4, 1])
    n_scenes = int(np.prod(pred.shape[:-2]))
    total = (huber(et / d, delta) * mu[0] + huber(eq, delta) * mu[1] + huber(es, delta) * mu[2])
    return total / n_scenes


# -- collision ---------------------------------------------------------------

def scene_iou_hard(clouds, d_scene: float, res: int = 64) -> float:
    return gm.collision_iou(gm.voxelize_surface(clouds, res, -d_scene, d_scene))


def collision_loss(clouds, d_scene: float, res: int = 64, delta: float = DELTA_C) -> float:
    """Hard path: Huber of the overlapping-surface-voxel ratio of posed clouds."""
    iou = scene_iou_hard([c for c in clouds], d_scene, res)
    return float(huber(np.array([iou]), delta).item())


def quat_to_matrix_t(q: Tensor) -> Tensor:
    """Differentiable rotation matrix from a unit quaternion [w, x, y, z], (..., 4) -> (..., 3, 3)."""
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return nx.stack([nx.stack(r, axis=-1) for r in rows], axis=-2)


def pose_points_t(points: np.ndarray, pose: Tensor) -> Tensor:
    """s R p + t for a fixed cloud under a differentiable (8,) pose."""
    t, q, s = nx.split(nx.as_tensor(pose), [3, 4, 1])
    R = quat_to_matrix_t(q)
    return nx.matmul(nx.as_tensor(points.astype(pose.dtype)), nx.transpose(R, (1, 0))) * s + t


def soft_surface(prob: Tensor) -> Tensor:
    """p * (1 - prod of the six neighbours' p): soft version of 'occupied with an exposed face'."""
    p = nx.as_tensor(prob)
    D = p.shape[0]
    neigh = []
    for ax in range(3):
        pad_shape = list(p.shape)
        pad_shape[ax] = 1
        zero = Tensor(np.zeros(pad_shape, dtype=p.dtype))
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(1, D)
        hi[ax] = slice(0, D - 1)
        neigh.append(nx.concat([p[tuple(lo)], zero], axis=ax))
        neigh.append(nx.concat([zero, p[tuple(hi)]], axis=ax))
    covered = neigh[0]
    for n in neigh[1:]:
        covered = covered * n
    return p * (1.0 - covered)


def splat_trilinear(points: Tensor, weights: Tensor, d_scene: float, res: int):
    """Trilinear splat onto cell centres of a res^3 grid over [-d, d]^3.

    Returns (flat cell ids, per-id accumulated mass) for the touched cells only.
    """
    u = (points + d_scene) * (res / (2.0 * d_scene)) - 0.5
    base = np.floor(u.data).astype(np.int64)
    frac = u - base.astype(u.dtype)
    ids, vals = [], []
    for corner in range(8):
        off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
        idx = base + off
        w = weights
        for ax in range(3):
            f = frac[:, ax]
            w = w * (f if off[ax] else 1.0 - f)
        ok = np.all((idx >= 0) & (idx < res), axis=1)
        flat = (idx[:, 0] * res + idx[:, 1]) * res + idx[:, 2]
        ids.append(flat[ok])
        vals.append(w[np.nonzero(ok)[0]])
    return np.concatenate(ids), nx.concat(vals, axis=0)


def soft_scene_iou(probs, poses, d_scene: float, res: int = 64, kappa: float = 20.0,
                   min_weight: float = 1e-4) -> Tensor:
    """Differentiable overlap ratio for soft fine-occupancy grids placed by poses.

    probs: list of (R, R, R) occupancy-probability tensors in canonical [-1, 1]^3;
    poses: list of (8,) pose tensors (query pose may be a constant identity).
    Each cell's occupancy from an asset is O = 1 - exp(-kappa * mass); the
    "claimed by >= 2 assets" probability is accumulated exactly, asset by asset.
    """
    per_asset = []
    all_ids = []
    for prob, pose in zip(probs, poses):
        surf = soft_surface(prob)
        R = surf.shape[0]
        keep = np.argwhere(surf.data > min_weight)
        if len(keep) == 0:
            per_asset.append(None)
            continue
        centers = gm.cell_centers(keep, R)
        w = surf[tuple(keep.T)]
        pts = pose_points_t(centers, nx.as_tensor(pose))
        ids, vals = splat_trilinear(pts, w, d_scene, res)
        per_asset.append((ids, vals))
        all_ids.append(ids)
    if not all_ids:
        return Tensor(np.zeros((), dtype=nx.get_default_dtype()))
    # compact ids of the touched cells via a dense lookup (same result as np.unique, no sort)
    flat = np.concatenate(all_ids)
    seen = np.zeros(res ** 3, dtype=bool)
    seen[flat] = True
    rank = np.cumsum(seen) - 1
    inverse = rank[flat]
    M = int(rank[-1]) + 1
    dt = next(a[1].dtype for a in per_asset if a is not None)
    p0 = Tensor(np.ones(M, dtype=dt))
    p1 = Tensor(np.zeros(M, dtype=dt))
    p2 = Tensor(np.zeros(M, dtype=dt))
    start = 0
    for entry in per_asset:
        if entry is None:
            continue
        ids, vals = entry
        inv = inverse[start:start + len(ids)]
        start += len(ids)
        mass = nx.scatter_add(vals, inv, M)
        occ = 1.0 - nx.exp(mass * (-kappa))
        p2 = p2 + p1 * occ
        p1 = p1 * (1.0 - occ) + p0 * occ
        p0 = p0 * (1.0 - occ)
    union = nx.tsum(1.0 - p0)
    return nx.tsum(p2) / (union + 1e-12)


def collision_loss_soft(probs, poses, d_scene: float, res: int = 64, delta: float = DELTA_C,
                        kappa: float = 20.0) -> Tensor:
    iou = soft_scene_iou(probs, poses, d_scene, res, kappa)
    return huber(nx.reshape(iou, (1,)), delta)


# -- combination -------------------------------------------------------------

def lambda_schedule(epoch: int, decay: float = LAMBDA_DECAY, floor: float = LAMBDA_MIN) -> float:
    return max(floor, decay ** int(epoch))


@dataclass
class LossBreakdown:
    cfm: float
    pos: float
    coll: float
    total: float
    lam: float

    def to_dict(self) -> dict:
        return {"cfm": self.cfm, "pos": self.pos, "coll": self.coll, "total": self.total, "lambda": self.lam}


def combine(cfm, pos, coll, lam: float):
    """total = cfm + lam * (pos + coll); returns (total tensor, LossBreakdown)."""
    if not LAMBDA_MIN <= lam <= LAMBDA_MAX:
        clamped = min(max(lam, LAMBDA_MIN), LAMBDA_MAX)
        warnings.warn(f"lambda {lam} outside [{LAMBDA_MIN}, {LAMBDA_MAX}], clamped to {clamped}")
        lam = clamped
    cfm, pos, coll = nx.as_tensor(cfm), nx.as_tensor(pos), nx.as_tensor(coll)
    total = cfm + (pos + coll) * lam
    return total, LossBreakdown(float(cfm.item()), float(pos.item()), float(coll.item()),
                                float(total.item()), float(lam))
