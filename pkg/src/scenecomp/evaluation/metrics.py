"""Geometric scene metrics: Chamfer distance, F-score, box IoU and collisions after rigid alignment.

Chamfer is the unsquared sum of the two directed mean nearest-neighbour distances.
Scenes are compared in a normalized space: each merged scene cloud is centred on its
centroid and scaled to unit max radius, the predicted query asset is registered onto
the ground-truth one, and that single rigid transform is applied to the whole
predicted scene before scoring.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .. import geomath as gm
from ..geomath import Pose8
from .registration import REGISTRATIONS, FilterReg, Registration, RegistrationError, register_icp

# worst-case scores for an asset with no predicted points; 2*sqrt(3) is the diagonal of [-1, 1]^3
EMPTY_CD = 4.0 * np.sqrt(3.0)
EMPTY_FSCORE = 0.0
EMPTY_IOU = 0.0


def _cloud(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64).reshape(-1, 3)


def nn_distances(a, b) -> np.ndarray:
    """Distance from every point of a to its nearest neighbour in b."""
    a, b = _cloud(a), _cloud(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("nearest-neighbour distances need non-empty clouds")
    return cKDTree(b).query(a)[0]


def chamfer(a, b) -> float:
    return float(nn_distances(a, b).mean() + nn_distances(b, a).mean())


def chamfer_brute(a, b) -> float:
    """O(N*M) reference implementation."""
    a, b = _cloud(a), _cloud(b)
    d = np.sqrt(np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1))
    return float(d.min(1).mean() + d.min(0).mean())


def fscore(a, b, tau: float = 0.1) -> float:
    """Harmonic mean of precision (a within tau of b) and recall (b within tau of a), times 100."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    precision = float(np.mean(nn_distances(a, b) <= tau))
    recall = float(np.mean(nn_distances(b, a) <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


def normalize_scene(clouds):
    """Centre the merged cloud at the origin and scale it to unit max radius."""
    clouds = [_cloud(c) for c in clouds]
    merged = np.concatenate(clouds)
    if len(merged) == 0:
        return clouds, np.zeros(3), 1.0
    c = merged.mean(0)
    r = float(np.linalg.norm(merged - c, axis=1).max())
    r = r if r > 0 else 1.0
    return [(p - c) / r for p in clouds], c, r


# -- scene geometry ------------------------------------------------------------

@dataclass
class SceneGeometry:
    """Canonical occupancy per asset plus its pose in the query asset's frame."""

    occupancies: list
    poses: list

    def __post_init__(self):
        if len(self.occupancies) != len(self.poses):
            raise ValueError(f"{len(self.occupancies)} occupancies but {len(self.poses)} poses")

    @property
    def n_assets(self) -> int:
        return len(self.poses)

    @classmethod
    def from_sample(cls, sample) -> "SceneGeometry":
        return cls(sample.occupancies(), list(sample.gt_poses))

    @classmethod
    def from_result(cls, result, decoder=None) -> "SceneGeometry":
        from ..heads import decode_structure
        from ..latents import decode_exact
        if decoder is None:
            occ = [decode_exact(lat) for lat in result.latents]
        else:
            occ = [decode_structure(lat, decoder)[0].counts > 0 for lat in result.latents]
        return cls(occ, list(result.poses))

    @classmethod
    def from_bundle(cls, path) -> "SceneGeometry":
        """Read a directory written by ``sampler.write_scene_bundle``."""
        path = Path(path)
        poses = [Pose8.from_json(d) for d in json.loads((path / "poses.json").read_text())]
        occ = [gm.read_voxels_rle(path / f"asset_{i:02d}.vox").counts > 0 for i in range(len(poses))]
        return cls(occ, poses)

    def sample_clouds(self, n_points: int = 4096, seed: int = 0) -> list[np.ndarray]:
        """Surface samples of each asset, posed into the query frame (empty assets give (0, 3))."""
        out = []
        for i, (occ, pose) in enumerate(zip(self.occupancies, self.poses)):
            rng = np.random.default_rng([seed, i])
            out.append(gm.apply_pose(gm.sample_surface(occ, n_points, rng), pose))
        return out


# -- alignment -------------------------------------------------------------------

def pca_rotations(src, dst) -> list[np.ndarray]:
    """The four proper rotations taking the principal axes of src onto those of dst."""
    def axes(p):
        w, v = np.linalg.eigh(np.cov(_cloud(p).T))
        return v[:, np.argsort(w)[::-1]]
    es, ed = axes(src), axes(dst)
    out = []
    for signs in [(1, 1, 1), (1, -1, -1), (-1, 1, -1), (-1, -1, 1)]:
        R = ed @ np.diag(signs) @ es.T
        if np.linalg.det(R) < 0:
            R = ed @ np.diag(signs) @ np.diag([1, 1, -1]) @ es.T
        out.append(R)
    return out


def align(src, dst, method: str = "filterreg", multistart: bool = True) -> Registration:
    """Rigidly register src onto dst.

    With ``multistart`` the search also starts from the principal-axis alignments and
    keeps the start with the lowest objective, so the result does not depend on how
    far src is rotated from dst.
    """
    if method not in REGISTRATIONS:
        raise ValueError(f"unknown registration {method!r}; choose from {sorted(REGISTRATIONS)}")
    src, dst = _cloud(src), _cloud(dst)
    inits = [np.eye(3)]
    if multistart:
        inits += pca_rotations(src, dst)
    if method == "filterreg":
        return FilterReg().register(src, dst, inits=inits)
    best = None
    mu_s, mu_d = src.mean(0), dst.mean(0)
    for R0 in inits:
        t0 = mu_d - R0 @ mu_s if multistart else np.zeros(3)
        reg = register_icp(src @ R0.T + t0, dst)
        # fold the start into the result
        R = reg.R @ R0
        reg = Registration(gm.matrix_to_quat(R), reg.R @ t0 + reg.t, reg.iterations, reg.objective,
                           reg.history, reg.converged)
        if best is None or reg.objective < best.objective:
            best = reg
    return best


# -- reports ---------------------------------------------------------------------

@dataclass
class MetricReport:
    cd_s: float
    fscore_s: float
    cd_o: list
    fscore_o: list
    iou_b: list
    collision_iou: float
    runtime: float = 0.0
    name: str = ""
    registration: str = "filterreg"
    empty_assets: list = field(default_factory=list)

    @property
    def cd_o_mean(self) -> float:
        return float(np.mean(self.cd_o))

    @property
    def fscore_o_mean(self) -> float:
        return float(np.mean(self.fscore_o))

    @property
    def iou_b_mean(self) -> float:
        return float(np.mean(self.iou_b))

    def summary(self) -> dict:
        return {"cd_s": self.cd_s, "cd_o": self.cd_o_mean, "fscore_s": self.fscore_s,
                "fscore_o": self.fscore_o_mean, "iou_b": self.iou_b_mean, "collision_iou": self.collision_iou}

    def to_dict(self, runtime: bool = True) -> dict:
        d = asdict(self)
        d.update({k + "_mean": getattr(self, k + "_mean") for k in ("cd_o", "fscore_o", "iou_b")})
        if not runtime:
            d.pop("runtime")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        keys = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in keys})


SUMMARY_COLUMNS = ["cd_s", "cd_o", "fscore_s", "fscore_o", "iou_b", "collision_iou"]
SUMMARY_HEADERS = ["CD-S ↓", "CD-O ↓", "F-Score-S ↑", "F-Score-O ↑", "IoU-B ↑", "Collision IoU ↓"]


def mean_summary(reports) -> dict:
    rows = [r.summary() for r in reports]
    return {k: float(np.mean([r[k] for r in rows])) for k in SUMMARY_COLUMNS}


def markdown_table(rows: dict, lead: dict | None = None) -> str:
    """One line per labelled summary dict. ``lead`` optionally maps each label to extra leading
    cells (a header -> value dict), e.g. component check marks."""
    lead = lead or {}
    extra = list(next(iter(lead.values())).keys()) if lead else []
    lines = ["| Method | " + "".join(f"{h} | " for h in extra) + " | ".join(SUMMARY_HEADERS) + " |",
             "|---|" + ":---:|" * len(extra) + "---:|" * len(SUMMARY_HEADERS)]
    for label, s in rows.items():
        cells = [str(lead[label][h]) for h in extra] if lead else []
        cells += [f"{s[k]:.4f}" for k in SUMMARY_COLUMNS]
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_reports(reports, out_dir, markdown: bool = False, label: str = "ours") -> dict:
    """metrics.json (per-scene and mean), metrics.csv (one row per scene plus the mean),
    optionally metrics.md, and timing.json. Everything except timing.json depends only on the
    inputs, so re-running an evaluation reproduces those files byte for byte."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mean = mean_summary(reports)
    paths = {"json": out / "metrics.json", "csv": out / "metrics.csv", "timing": out / "timing.json"}
    paths["json"].write_text(json.dumps({"scenes": [r.to_dict(runtime=False) for r in reports], "mean": mean},
                                        indent=1, sort_keys=True))
    with open(paths["csv"], "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["scene"] + SUMMARY_COLUMNS)
        for r in reports:
            s = r.summary()
            w.writerow([r.name] + [repr(s[k]) for k in SUMMARY_COLUMNS])
        w.writerow(["mean"] + [repr(mean[k]) for k in SUMMARY_COLUMNS])
    if markdown:
        paths["md"] = out / "metrics.md"
        paths["md"].write_text(markdown_table({label: mean}))
    paths["timing"].write_text(json.dumps({r.name: r.runtime for r in reports}, indent=1, sort_keys=True))
    return paths


def read_reports(path) -> list[MetricReport]:
    d = json.loads(Path(path).read_text())
    return [MetricReport.from_dict(r) for r in d["scenes"]]


# -- scene evaluation --------------------------------------------------------------

@dataclass
class EvalConfig:
    n_points: int = 4096
    tau: float = 0.1
    registration: str = "filterreg"
    multistart: bool = True
    collision_res: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n_points < 3:
            raise ValueError("n_points must be at least 3")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.registration not in REGISTRATIONS:
            raise ValueError(f"unknown registration {self.registration!r}")


def aligned_clouds(pred, gt, cfg: EvalConfig | None = None, query_index: int = 0):
    """Normalize both scenes, then move the prediction by the rigid fit of its query asset onto the GT one."""
    cfg = cfg or EvalConfig()
    pred, gt = [_cloud(p) for p in pred], [_cloud(g) for g in gt]
    if len(pred) != len(gt):
        raise ValueError(f"asset count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
    if any(len(g) == 0 for g in gt):
        raise ValueError("ground-truth assets must be non-empty")
    gt, _, _ = normalize_scene(gt)
    pred, _, _ = normalize_scene(pred)
    q = pred[query_index]
    if len(q) >= 3:
        try:
            reg = align(q, gt[query_index], cfg.registration, cfg.multistart)
            pred = [reg.apply(p) if len(p) else p for p in pred]
        except RegistrationError:
            pass  # degenerate predicted query: keep the normalized frame
    return pred, gt


def evaluate_clouds(pred, gt, cfg: EvalConfig | None = None, query_index: int = 0, name: str = "") -> MetricReport:
    """Score per-asset predicted clouds against ground-truth clouds (same asset order)."""
    cfg = cfg or EvalConfig()
    t0 = time.perf_counter()
    pred, gt = aligned_clouds(pred, gt, cfg, query_index)
    empty = [i for i, p in enumerate(pred) if len(p) == 0]
    cd_o, f_o, iou = [], [], []
    for p, g in zip(pred, gt):
        if len(p) == 0:
            cd_o.append(EMPTY_CD)
            f_o.append(EMPTY_FSCORE)
            iou.append(EMPTY_IOU)
            continue
        cd_o.append(chamfer(p, g))
        f_o.append(fscore(p, g, cfg.tau))
        iou.append(gm.bbox_iou(p, g))
    live = [p for p in pred if len(p)]
    merged_gt = np.concatenate(gt)
    if live:
        merged = np.concatenate(live)
        cd_s, f_s = chamfer(merged, merged_gt), fscore(merged, merged_gt, cfg.tau)
        coll = gm.collision_iou(gm.voxelize_surface(live, cfg.collision_res, -1.0, 1.0))
    else:
        cd_s, f_s, coll = EMPTY_CD, EMPTY_FSCORE, 0.0
    return MetricReport(cd_s, f_s, cd_o, f_o, iou, coll, time.perf_counter() - t0, name, cfg.registration, empty)


def evaluate_scene(pred: SceneGeometry, gt: SceneGeometry, cfg: EvalConfig | None = None,
                   name: str = "") -> MetricReport:
    cfg = cfg or EvalConfig()
    if pred.n_assets != gt.n_assets:
        raise ValueError(f"asset count mismatch: {pred.n_assets} predicted vs {gt.n_assets} ground truth")
    return evaluate_clouds(pred.sample_clouds(cfg.n_points, cfg.seed), gt.sample_clouds(cfg.n_points, cfg.seed),
                           cfg, 0, name)


def render_diagnostic(pred: SceneGeometry, gt: SceneGeometry, cfg: EvalConfig | None = None,
                      n_views: int = 4, res: int = 64) -> dict:
    """PSNR and SSIM between orthographic depth renders of the aligned prediction and the GT.

    A toy-scale diagnostic: the renders are point-splat depth maps, framed by the
    GT scene, so the numbers are not comparable to photometric image metrics.
    Needs scikit-image (the ``diag`` extra).
    """
    from skimage.metrics import peak_signal_noise_ratio, structural_similarity

    from ..synth import orbit_cameras, render_frame, render_views
    cfg = cfg or EvalConfig()
    p, g = aligned_clouds(pred.sample_clouds(cfg.n_points, cfg.seed), gt.sample_clouds(cfg.n_points, cfg.seed), cfg)
    cams = orbit_cameras(n_views)
    frames = [render_frame(np.concatenate(g), c) for c in cams]
    alb = np.ones(len(g))
    live = [c for c in p if len(c)] or [np.zeros((1, 3))]
    vg, _ = render_views(g, alb, cams, res, frames=frames)
    vp, _ = render_views(live, alb[:len(live)], cams, res, frames=frames)
    dg, dp = vg[..., 1].astype(np.float64), vp[..., 1].astype(np.float64)
    psnr = [np.inf if np.array_equal(a, b) else peak_signal_noise_ratio(a, b, data_range=1.0)
            for a, b in zip(dg, dp)]
    ssim = [structural_similarity(a, b, data_range=1.0) for a, b in zip(dg, dp)]
    return {"depth_psnr": float(np.mean(psnr)), "depth_ssim": float(np.mean(ssim))}


def scene_collision(geometry: SceneGeometry, cfg: EvalConfig | None = None) -> float:
    """Hard collision IoU of a scene in its own normalized frame."""
    cfg = cfg or EvalConfig()
    clouds, _, _ = normalize_scene(geometry.sample_clouds(cfg.n_points, cfg.seed))
    live = [c for c in clouds if len(c)]
    return gm.collision_iou(gm.voxelize_surface(live, cfg.collision_res, -1.0, 1.0)) if live else 0.0


# -- paired registration benchmark ----------------------------------------------------

def perturbed_prediction(clouds, rng: np.random.Generator, noise: float = 0.01, outliers: float = 0.1,
                         max_angle: float = np.radians(30.0), max_shift: float = 0.2) -> list[np.ndarray]:
    """Ground-truth clouds with Gaussian noise, uniform outliers and one global rigid offset."""
    clouds, _, _ = normalize_scene(clouds)
    axis = rng.normal(size=3)
    R = gm.quat_to_matrix(gm.quat_from_axis_angle(axis, rng.uniform(0, max_angle)))
    t = rng.uniform(-max_shift, max_shift, 3)
    out = []
    for c in clouds:
        p = c + rng.normal(0, noise, c.shape)
        k = int(round(outliers * len(c)))
        if k:
            lo, hi = c.min(0), c.max(0)
            p[rng.choice(len(c), k, replace=False)] = rng.uniform(lo, hi, (k, 3))
        out.append(p @ R.T + t)
    return out


def paired_benchmark(scenes, trials: int = 50, seed: int = 0, n_points: int = 2048, tau: float = 0.1,
                     **perturb) -> dict:
    """Align the same perturbed predictions with each registration method and compare CD-S.

    ``scenes`` is a sequence of SceneGeometry cycled over the trials. Registration starts
    from the unaligned pose for both methods so only the method differs.
    """
    rng = np.random.default_rng(seed)
    res = {m: [] for m in REGISTRATIONS}
    for k in range(trials):
        gt = scenes[k % len(scenes)].sample_clouds(n_points, seed + k)
        pred = perturbed_prediction(gt, rng, **perturb)
        for m in REGISTRATIONS:
            cfg = EvalConfig(n_points=n_points, tau=tau, registration=m, multistart=False)
            res[m].append(evaluate_clouds(pred, gt, cfg).cd_s)
    return {m: {"cd_s": v, "mean": float(np.mean(v))} for m, v in res.items()}
