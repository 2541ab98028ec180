"""Training: asset-count batching, the three-term objective, checkpoints, decoder pre-training."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from . import losses
from . import numerics as nx
from .encoders import FeatureBundle
from .geomath import Pose8
from .heads import StructureDecoder, decode_structure, decoder_targets, soft_occupancy
from .latents import EMPTY_FEAT, SparseLatent, encode_occupancy
from .model import ABLATION_FLAGS, AblationFlags, ModelConfig, SceneModel
from .numerics import Tensor
from .synth import SceneSample, augment_query_rotation

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


T_SAMPLINGS = ("uniform", "logit_normal")


def sample_times(cfg: "TrainConfig", rng: np.random.Generator, n: int) -> np.ndarray:
    if cfg.t_sampling == "uniform":
        return rng.random(n)
    return 1.0 / (1.0 + np.exp(-(cfg.t_loc + cfg.t_scale * rng.standard_normal(n))))


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 8
    epochs: int = 240
    lambda_decay: float = 0.99
    lambda_min: float = 0.2
    delta_p: float = 0.02
    delta_c: float = 0.05
    mu_t: float = 1.0
    mu_q: float = 1.0
    mu_s: float = 1.0
    cond_dropout_p: float = 0.1
    t_sampling: str = "uniform"  # or "logit_normal": t = sigmoid(t_loc + t_scale * n)
    t_loc: float = 0.0
    t_scale: float = 1.0
    drop_geo: bool = False
    drop_global_v: bool = False
    drop_mask: bool = False
    ss_to_as: bool = False
    seed: int = 0
    trainable: str = "global_only"
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    augment: bool = True
    collision: bool = True
    collision_res: int = 64
    collision_kappa: float = 20.0
    dtype: str = "float32"
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.cond_dropout_p < 1.0:
            raise ValueError("cond_dropout_p must lie in [0, 1)")
        if self.t_sampling not in T_SAMPLINGS:
            raise ValueError(f"t_sampling must be one of {T_SAMPLINGS}")
        if self.t_scale <= 0:
            raise ValueError("t_scale must be positive")
        self.betas = tuple(self.betas)

    @property
    def flags(self) -> AblationFlags:
        return AblationFlags(**{k: getattr(self, k) for k in ABLATION_FLAGS})

    @property
    def mu(self) -> tuple[float, float, float]:
        return (self.mu_t, self.mu_q, self.mu_s)

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict(self.model)

    def lam(self, epoch: int) -> float:
        return losses.lambda_schedule(epoch, self.lambda_decay, self.lambda_min)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ValueError(f"unknown train config key(s): {unknown}")
        return cls(**d)


# -- data --------------------------------------------------------------------

class TrainItem(NamedTuple):
    """One training scene with its conditioning precomputed by the frozen encoders."""

    f_asset: np.ndarray  # (N, L, C)
    f_mask: np.ndarray
    f_global_v: np.ndarray  # (1, L, C)
    f_global_geo: np.ndarray
    x0: np.ndarray  # (N, D, D, D, C)
    gt: np.ndarray  # (N-1, 8)
    d_scene: float

    @property
    def n_assets(self) -> int:
        return self.x0.shape[0]


def expand_samples(samples: Sequence[SceneSample], augment: bool) -> list[SceneSample]:
    out = []
    for s in samples:
        out.extend(augment_query_rotation(s) if augment else [s])
    return out


def prepare_items(model: SceneModel, samples: Sequence[SceneSample], view_index: int = 0) -> list[TrainItem]:
    items = []
    with nx.no_grad():
        for s in samples:
            b = model.encode(s.views[view_index][None], s.masks[view_index][None])
            gt = np.stack([p.to_vector() for p in s.gt_poses[1:]]) if s.n_assets > 1 else np.zeros((0, 8))
            items.append(TrainItem(b.f_asset.data[0], b.f_mask.data[0], b.f_global_v.data[0],
                                   b.f_global_geo.data[0], s.dense_latents().astype(np.float64), gt,
                                   float(s.d_scene)))
    return items


def make_batches(asset_counts: Sequence[int], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Index batches in which every scene has the same asset count; all indices used once."""
    if len(asset_counts) == 0:
        raise ValueError("empty corpus")
    counts = np.asarray(asset_counts)
    batches = []
    for n in np.unique(counts):
        idx = np.flatnonzero(counts == n)
        idx = idx[rng.permutation(len(idx))]
        batches.extend(idx[i:i + batch_size].tolist() for i in range(0, len(idx), batch_size))
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def stack_items(items: Sequence[TrainItem]) -> tuple[FeatureBundle, np.ndarray, np.ndarray, np.ndarray]:
    dt = nx.get_default_dtype()
    t = lambda key: Tensor(np.stack([getattr(it, key) for it in items]).astype(dt))
    bundle = FeatureBundle(t("f_asset"), t("f_mask"), t("f_global_v"), t("f_global_geo"))
    x0 = np.stack([it.x0 for it in items]).astype(dt)
    gt = np.stack([it.gt for it in items])
    d = np.array([it.d_scene for it in items])
    return bundle, x0, gt, d


# -- one optimisation step -----------------------------------------------------

def identity_pose_tensor(dtype) -> Tensor:
    return Tensor(Pose8.identity().to_vector().astype(dtype))


def batch_collision_loss(decoder: StructureDecoder, clean: Tensor, poses: Tensor, d_scene: np.ndarray,
                         rows: Sequence[int], cfg: TrainConfig) -> Tensor:
    dt = clean.dtype
    terms = []
    N = clean.shape[1]
    for b in rows:
        probs = [soft_occupancy(decoder, clean[b, i]) for i in range(N)]
        pose_list = [identity_pose_tensor(dt)] + [poses[b, j] for j in range(N - 1)]
        terms.append(losses.collision_loss_soft(probs, pose_list, float(d_scene[b]), cfg.collision_res,
                                                cfg.delta_c, cfg.collision_kappa))
    return nx.tsum(nx.stack(terms)) / len(terms)


def train_step(model: SceneModel, decoder: StructureDecoder, items: Sequence[TrainItem], cfg: TrainConfig,
               rng: np.random.Generator, opt: nx.AdamW, lam: float):
    """One optimizer step on a same-asset-count batch. Returns LossBreakdown."""
    bundle, x0, gt, d_scene = stack_items(items)
    B, N = x0.shape[:2]
    dt = x0.dtype
    t = sample_times(cfg, rng, B)
    eps = rng.standard_normal(x0.shape).astype(dt)
    cond = rng.random(B) >= cfg.cond_dropout_p
    tt = t.reshape(B, 1, 1, 1, 1, 1).astype(dt)
    x_t = (1 - tt) * x0 + tt * eps

    out = model(x_t, t, bundle, cond=cond)
    cfm = losses.cfm_loss(out.velocity, x0, eps)
    rows = np.flatnonzero(cond).tolist()
    zero = Tensor(np.zeros((), dtype=dt))
    if N > 1 and rows:
        pos = losses.position_loss(out.poses[rows], gt[rows], d_scene[rows], cfg.mu, cfg.delta_p)
        coll = batch_collision_loss(decoder, out.clean, out.poses, d_scene, rows, cfg) if cfg.collision else zero
    else:
        pos, coll = zero, zero
    total, br = losses.combine(cfm, pos, coll, lam)
    if not np.isfinite(br.total):
        raise NonFiniteLossError(f"non-finite loss {br.to_dict()} (t={t.tolist()}, cond={cond.tolist()})")
    opt.zero_grad()
    nx.backward(total)
    opt.step()
    return br


# -- the loop ------------------------------------------------------------------

def _dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


class Trainer:
    """Owns the model, optimizer, RNG and step counters for one run."""

    def __init__(self, cfg: TrainConfig, decoder: StructureDecoder, samples: Sequence[SceneSample] | None = None,
                 model: SceneModel | None = None, log_path=None):
        self.cfg = cfg
        self.dtype = _dtype(cfg.dtype)
        with nx.default_dtype(self.dtype):
            self.model = model if model is not None else SceneModel(cfg.model_config(), cfg.flags)
            self.model.flags = cfg.flags
            self.model.set_trainable(cfg.trainable)
            for p in decoder.parameters():
                p.data = p.data.astype(self.dtype)
                p.requires_grad = False
            self.decoder = decoder
            self.opt = nx.AdamW([p for _, p in self.model.trainable_parameters()], lr=cfg.lr, betas=cfg.betas,
                                weight_decay=cfg.weight_decay, eps=cfg.adam_eps)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.epoch = 0
        self.log_path = Path(log_path) if log_path else None
        self.items: list[TrainItem] = []
        if samples is not None:
            self.set_data(samples)

    def set_data(self, samples: Sequence[SceneSample]) -> None:
        with nx.default_dtype(self.dtype):
            self.items = prepare_items(self.model, expand_samples(samples, self.cfg.augment))

    def _log(self, rec: dict) -> None:
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.log_path, "a") as f:
                f.write(json.dumps(rec) + "\n")

    def run_epoch(self) -> list[losses.LossBreakdown]:
        if not self.items:
            raise ValueError("no training data")
        lam = self.cfg.lam(self.epoch)
        out = []
        with nx.default_dtype(self.dtype):
            for idx in make_batches([it.n_assets for it in self.items], self.cfg.batch_size, self.rng):
                br = train_step(self.model, self.decoder, [self.items[i] for i in idx], self.cfg,
                                self.rng, self.opt, lam)
                self.step += 1
                self._log({"step": self.step, "epoch": self.epoch, **br.to_dict()})
                out.append(br)
        self.epoch += 1
        return out

    def fit(self, epochs: int | None = None, callback=None) -> list[losses.LossBreakdown]:
        hist = []
        for _ in range(self.cfg.epochs if epochs is None else epochs):
            hist.extend(self.run_epoch())
            if callback is not None:
                callback(self)
        return hist

    # -- checkpoints -------------------------------------------------------
    def save(self, ckpt_dir) -> Path:
        d = Path(ckpt_dir)
        d.mkdir(parents=True, exist_ok=True)
        save_model(self.model, d / "weights.sckp", {"model": self.model.cfg.to_dict(), "train": self.cfg.to_dict()})
        nx.save_arrays(d / "optimizer.sckp", self.opt.state_arrays())
        (d / "rng-state.json").write_text(json.dumps(self.rng.bit_generator.state))
        (d / "step.json").write_text(json.dumps({"step": self.step, "epoch": self.epoch}))
        return d

    def load(self, ckpt_dir) -> None:
        d = Path(ckpt_dir)
        arrays, _ = nx.load_arrays(d / "weights.sckp")
        self.model.load_state_dict(arrays)
        self.opt.load_state_arrays(nx.load_arrays(d / "optimizer.sckp")[0])
        self.rng.bit_generator.state = json.loads((d / "rng-state.json").read_text())
        st = json.loads((d / "step.json").read_text())
        self.step, self.epoch = int(st["step"]), int(st["epoch"])


def save_model(model: SceneModel, path, meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta.setdefault("model", model.cfg.to_dict())
    meta["flags"] = model.flags.names()
    meta["trainable"] = [n for n, p in model.named_parameters() if p.requires_grad]
    nx.save_arrays(path, model.state_dict(), meta)


def load_model(path, dtype=np.float64) -> tuple[SceneModel, dict]:
    arrays, meta = nx.load_arrays(path)
    with nx.default_dtype(dtype):
        model = SceneModel(ModelConfig.from_dict(meta["model"]), AblationFlags.from_names(meta.get("flags", [])))
    model.load_state_dict(arrays)
    trainable = set(meta.get("trainable", []))
    for n, p in model.named_parameters():
        p.requires_grad = n in trainable
    return model, meta


def apply_ablation(model: SceneModel, flags: AblationFlags) -> SceneModel:
    """Variant of ``model`` with streams dropped or scene self-attention made per-asset."""
    return model.with_flags(flags)


# -- structure decoder pre-training ---------------------------------------------

def _bce_logits(z: Tensor, y: np.ndarray) -> Tensor:
    return nx.mean(nx.softplus(z) - z * y.astype(z.dtype))


def decoder_dataset(occupancies: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    feats = np.stack([encode_occupancy(o).to_dense() for o in occupancies]).astype(np.float64)
    return feats, decoder_targets(occupancies)


def train_decoder(occupancies: Sequence[np.ndarray], steps: int = 300, lr: float = 3e-3, noise: float = 0.3,
                  batch: int = 4, seed: int = 0, scale=(0.5, 4.0)) -> StructureDecoder:
    """Fit the per-voxel decoder on exact latents, randomly rescaled and perturbed by Gaussian noise.

    The sub-cell bits depend only on the sign pattern of the unmixed code, so a
    rescaled code keeps its target; this keeps the decoder consistent on the
    over-scaled latents that strong guidance produces.
    """
    rng = np.random.default_rng(seed)
    dec = StructureDecoder(rng)
    opt = nx.AdamW(dec.parameters(), lr=lr, weight_decay=0.0)
    feats, bits = decoder_dataset(occupancies)
    flat_f = feats.reshape(-1, feats.shape[-1])
    flat_b = bits.reshape(-1, 8)
    cells_per = feats[0].size // feats.shape[-1]
    for _ in range(steps):
        pick = rng.integers(0, len(flat_f), size=batch * cells_per)
        gain = rng.uniform(scale[0], scale[1], size=(len(pick), 1))
        x = gain * flat_f[pick] + noise * rng.standard_normal((len(pick), flat_f.shape[1]))
        opt.zero_grad()
        loss = _bce_logits(dec(x.astype(nx.get_default_dtype())), flat_b[pick])
        nx.backward(loss)
        opt.step()
    return dec


def occupancy_iou(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def decoder_iou(dec: StructureDecoder, occupancies: Sequence[np.ndarray]) -> list[float]:
    out = []
    for occ in occupancies:
        grid, _ = decode_structure(encode_occupancy(occ), dec)
        out.append(occupancy_iou(grid.counts, occ))
    return out


def save_decoder(dec: StructureDecoder, path, meta: dict | None = None) -> None:
    nx.save_arrays(path, dec.state_dict(), meta or {})


def load_decoder(path, dtype=np.float64) -> StructureDecoder:
    arrays, _ = nx.load_arrays(path)
    with nx.default_dtype(dtype):
        dec = StructureDecoder(np.random.default_rng(0))
    dec.load_state_dict(arrays)
    return dec


# -- overfit recipe --------------------------------------------------------------

# Memorising a handful of scenes hinges on the noise-dominated end of the path,
# where the asset's shape must come from the conditioning alone; the timestep
# distribution is skewed there. Collision loss is off: it costs most of a step
# and the recipe targets per-asset geometry and poses.
OVERFIT_RECIPE = dict(lr=2e-3, batch_size=8, augment=False, trainable="generator", collision=False,
                      t_sampling="logit_normal", t_loc=2.0, t_scale=1.0)


@dataclass
class OverfitResult:
    trainer: Trainer
    decoder: StructureDecoder
    epochs: int
    cpu_seconds: float

    @property
    def model(self) -> SceneModel:
        return self.trainer.model


def overfit_run(scenes: Sequence[SceneSample], epochs: int = 3200, cpu_budget: float | None = 29 * 60,
                decoder_steps: int = 400, seed: int = 0, log_path=None, **overrides) -> OverfitResult:
    """Fit decoder and generator to ``scenes``; stops early once ``cpu_budget`` seconds of CPU time are used."""
    t0 = time.process_time()
    occs = [o for s in scenes for o in s.occupancies()]
    dec = train_decoder(occs, steps=decoder_steps, seed=seed)
    cfg = TrainConfig(**{**OVERFIT_RECIPE, "seed": seed, **overrides})
    T = Trainer(cfg, dec, scenes, log_path=log_path)
    done = 0
    while done < epochs:
        T.run_epoch()
        done += 1
        if cpu_budget is not None and time.process_time() - t0 >= cpu_budget:
            log.info("overfit run stopped at epoch %d: cpu budget reached", done)
            break
    return OverfitResult(T, dec, done, time.process_time() - t0)
