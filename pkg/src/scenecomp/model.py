"""The scene generator: encoders, latent tokenizer, DiT stack, and output heads.

Latent grids (D^3 x C, dense) are cut into cubic patches, so every asset
contributes the same number of tokens T. Three output parametrizations:

* ``"precond"`` (default): v = c_skip(t) x_t + c_out(t) F(c_in(t) x_t), with the
  coefficients of the best linear velocity estimate for data of std sigma_data,
  so F only models a unit-variance residual and never has to copy the noise.
* ``"velocity"``: the network output is the velocity.
* ``"clean"``: the output is the clean latent, v = (x_t - x0) / max(t, t_floor).

In every case the clean estimate is reported as ``x_t - t * v`` (or directly).
"""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import numerics as nx
from .aggregator import DiTBlock, TimestepEmbedder, TokenSet, modulate
from .encoders import FeatureBundle, GeometricEncoder, VisualEncoder, encode_batch
from .heads import PositionHead
from .numerics import Module, Tensor

PREDICTIONS = ("precond", "velocity", "clean")
ABLATION_FLAGS = ("drop_geo", "drop_global_v", "drop_mask", "ss_to_as")

GROUPS = ("encoders", "flow_io", "local", "global", "tokens", "pos_head", "null")
TRAINABLE_SETS = {
    "global_only": ("global", "tokens", "pos_head"),
    "generator": ("flow_io", "local", "global", "tokens", "pos_head", "null"),
    "all": GROUPS,
}


def precond_coefficients(t, sigma_data: float = 1.0):
    """(c_in, c_skip, c_out) for x_t = (1 - t) x0 + t eps with std(x0) = sigma_data, std(eps) = 1.

    c_in normalises x_t to unit variance; c_skip x_t is the least-squares linear
    estimate of eps - x0 and c_out is the std of what remains.
    """
    t = np.asarray(t, dtype=np.float64)
    s2 = sigma_data ** 2
    var = (1.0 - t) ** 2 * s2 + t ** 2
    return 1.0 / np.sqrt(var), (t - (1.0 - t) * s2) / var, sigma_data / np.sqrt(var)


@dataclass
class ModelConfig:
    dim: int = 64
    heads: int = 4
    depth: int = 4
    cond_dim: int = 64
    enc_layers: int = 2
    enc_heads: int = 4
    view_res: int = 32
    view_patch: int = 4
    view_channels: int = 3
    latent_res: int = 16
    latent_channels: int = 8
    latent_patch: int = 4
    n_registers: int = 4
    head_layers: int = 4
    mlp_ratio: int = 2
    out_hidden: int = 256
    t_floor: float = 0.02
    prediction: str = "precond"  # "precond" | "velocity" | "clean"
    sigma_data: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.prediction not in PREDICTIONS:
            raise ValueError(f"prediction must be one of {PREDICTIONS}, got {self.prediction!r}")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")

    @property
    def n_latent_tokens(self) -> int:
        return (self.latent_res // self.latent_patch) ** 3

    @property
    def patch_features(self) -> int:
        return self.latent_patch ** 3 * self.latent_channels

    @property
    def n_view_tokens(self) -> int:
        return (self.view_res // self.view_patch) ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config key(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class AblationFlags:
    drop_geo: bool = False
    drop_global_v: bool = False
    drop_mask: bool = False
    ss_to_as: bool = False

    @classmethod
    def from_names(cls, names) -> "AblationFlags":
        names = [n for n in names if n]
        bad = [n for n in names if n not in ABLATION_FLAGS]
        if bad:
            raise ValueError(f"unknown ablation flag(s): {bad}")
        return cls(**{n: True for n in names})

    def names(self) -> list[str]:
        return [n for n in ABLATION_FLAGS if getattr(self, n)]


class FlowOutput(NamedTuple):
    velocity: Tensor  # (B, N, D, D, D, C)
    clean: Tensor  # predicted x0, same shape
    poses: Tensor  # (B, N-1, 8), non-query assets in index order
    latent_tokens: Tensor  # (B, N, T, dim) after the last block
    pos_tokens: Tensor  # (B, N, 1+R, dim)


def patchify_volume(x, p: int) -> Tensor:
    """(..., D, D, D, C) -> (..., (D/p)^3, p^3*C)."""
    x = nx.as_tensor(x)
    *lead, D, _, _, C = x.shape
    g = D // p
    nl = len(lead)
    x = nx.reshape(x, (*lead, g, p, g, p, g, p, C))
    x = nx.transpose(x, tuple(range(nl)) + tuple(nl + a for a in (0, 2, 4, 1, 3, 5, 6)))
    return nx.reshape(x, (*lead, g ** 3, p ** 3 * C))


def unpatchify_volume(x, p: int, C: int) -> Tensor:
    x = nx.as_tensor(x)
    *lead, T, _ = x.shape
    g = round(T ** (1 / 3))
    nl = len(lead)
    x = nx.reshape(x, (*lead, g, g, g, p, p, p, C))
    x = nx.transpose(x, tuple(range(nl)) + tuple(nl + a for a in (0, 3, 1, 4, 2, 5, 6)))
    return nx.reshape(x, (*lead, g * p, g * p, g * p, C))


def param_group(name: str) -> str:
    head = name.split(".")[0]
    if head in ("visual", "geometric"):
        return "encoders"
    if head == "blocks":
        return "global" if name.split(".")[2] == "glob" else "local"
    if head == "tokens":
        return "tokens"
    if head in ("pos_head", "pos_norm"):
        return "pos_head"
    if head == "null_cond":
        return "null"
    return "flow_io"


class SceneModel(Module):
    def __init__(self, cfg: ModelConfig | None = None, flags: AblationFlags | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.flags = flags or AblationFlags()
        rng = np.random.default_rng(cfg.seed)
        d, h = cfg.dim, cfg.heads
        self.visual = VisualEncoder(cfg.view_res, cfg.view_patch, cfg.view_channels, cfg.cond_dim,
                                    cfg.enc_heads, cfg.enc_layers, rng)
        self.geometric = GeometricEncoder(cfg.view_res, cfg.view_patch, cfg.view_channels, cfg.cond_dim,
                                          cfg.enc_heads, cfg.enc_layers, rng)
        self.latent_in = nx.Linear(cfg.patch_features, d, rng)
        self.latent_pos = nx.normal_param(rng, (cfg.n_latent_tokens, d), 0.02)
        self.t_embed = TimestepEmbedder(d, rng)
        self.tokens = TokenSet(d, rng, cfg.n_registers)
        self.blocks = [DiTBlock(d, h, cfg.cond_dim, rng, cfg.mlp_ratio) for _ in range(cfg.depth)]
        self.norm_out = nx.LayerNorm(d, affine=False)
        self.out_mod = nx.Linear(d, 2 * d, rng, std=0.02)
        self.latent_out = nx.MLP(d, cfg.out_hidden, rng, d_out=cfg.patch_features)
        self.pos_norm = nx.LayerNorm(d)
        self.pos_head = PositionHead(d, h, rng, cfg.head_layers)
        self.null_cond = nx.normal_param(rng, (cfg.n_view_tokens, cfg.cond_dim), 0.02)

    @property
    def dtype(self):
        return self.latent_pos.dtype

    # -- parameter bookkeeping -------------------------------------------
    def groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        out: dict[str, list] = {g: [] for g in GROUPS}
        for name, p in self.named_parameters():
            out[param_group(name)].append((name, p))
        return out

    def set_trainable(self, selector: str = "global_only") -> None:
        if selector not in TRAINABLE_SETS:
            raise ValueError(f"unknown trainable set {selector!r}")
        keep = TRAINABLE_SETS[selector]
        for name, p in self.named_parameters():
            p.requires_grad = param_group(name) in keep

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def with_flags(self, flags: AblationFlags) -> "SceneModel":
        """Variant sharing every weight with this model."""
        twin = copy.copy(self)
        twin.flags = flags
        return twin

    # -- conditioning ----------------------------------------------------
    def encode(self, views, masks, geo_views=None, view_index=None) -> FeatureBundle:
        dt = self.dtype
        r = self.cfg.view_res
        for name, a in (("views", views), ("geo_views", geo_views)):
            if a is not None and np.shape(a)[-3:-1] != (r, r):
                raise ValueError(f"{name} are {np.shape(a)[-3]}x{np.shape(a)[-2]} but the model expects "
                                 f"view_res={r}")
        gv = None if geo_views is None else np.asarray(geo_views, dtype=dt)
        return encode_batch(self.visual, self.geometric, np.asarray(views, dtype=dt), np.asarray(masks, dtype=dt),
                            geo_views=gv, view_index=view_index)

    def condition(self, bundle: FeatureBundle, n_assets: int, cond=None) -> tuple[Tensor, Tensor]:
        """Per-asset (f_asset, f_scene), with null tokens where ``cond`` is False."""
        fl = self.flags
        b = bundle.with_flags(drop_geo=fl.drop_geo, drop_global_v=fl.drop_global_v, drop_mask=fl.drop_mask)
        streams = b.streams()
        B = streams[0].shape[0]
        L = self.null_cond.shape[0]
        if any(s.shape[-2] != L for s in streams):
            raise ValueError("conditioning streams must all have the null-token length")
        out = []
        for s in streams:
            s = s if s.shape[1] == n_assets else nx.expand(s, (B, n_assets) + s.shape[2:])
            if cond is not None:
                keep = np.asarray(cond, dtype=bool).reshape(B, 1, 1, 1)
                if not keep.all():
                    s = nx.where(np.broadcast_to(keep, s.shape), s, nx.expand(self.null_cond, s.shape))
            out.append(s)
        return out[0], nx.concat(out, axis=-2)

    # -- forward ---------------------------------------------------------
    def run_blocks(self, x: Tensor, pr: Tensor, f_asset: Tensor, f_scene: Tensor, c: Tensor,
                   use_global: bool = True) -> tuple[Tensor, Tensor]:
        for blk in self.blocks:
            x, pr = blk(x, pr, f_asset, f_scene, c, asset_level=self.flags.ss_to_as, use_global=use_global)
        return x, pr

    def forward(self, x_t, t, bundle: FeatureBundle, cond=None, query_index: int = 0,
                use_global: bool = True) -> FlowOutput:
        """x_t: (B, N, D, D, D, C); t: (B,) in [0, 1]; cond: optional (B,) bool (False = null)."""
        cfg = self.cfg
        dt = self.dtype
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(np.asarray(x_t, dtype=dt))
        B, N = x_t.shape[:2]
        want = (cfg.latent_res,) * 3 + (cfg.latent_channels,)
        if tuple(x_t.shape[2:]) != want:
            raise ValueError(f"latents have shape {tuple(x_t.shape[2:])} but the model expects {want} "
                             f"(latent_res={cfg.latent_res})")
        if not 0 <= query_index < N:
            raise ValueError("query index out of range")
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.shape[0] != B:
            t = np.broadcast_to(t, (B,))
        if np.any((t < 0) | (t > 1)):
            raise ValueError("t must lie in [0, 1]")
        f_asset, f_scene = self.condition(bundle, N, cond)
        tb = t.astype(dt).reshape(B, 1, 1, 1, 1, 1)
        if cfg.prediction == "precond":
            c_in, c_skip, c_out = (np.asarray(a, dtype=dt).reshape(B, 1, 1, 1, 1, 1)
                                   for a in precond_coefficients(t, cfg.sigma_data))
            x_in = x_t * c_in
        else:
            x_in = x_t
        x = self.latent_in(patchify_volume(x_in, cfg.latent_patch)) + self.latent_pos
        c = self.t_embed(t)
        pr = self.tokens(B, N, query_index)
        x, pr = self.run_blocks(x, pr, f_asset, f_scene, c, use_global)

        shift, scale = nx.split(nx.reshape(self.out_mod(nx.silu(c)), (B, 1, 1, 2 * cfg.dim)), [cfg.dim, cfg.dim])
        head = unpatchify_volume(self.latent_out(modulate(self.norm_out(x), shift, scale)),
                                 cfg.latent_patch, cfg.latent_channels)
        if cfg.prediction == "clean":
            clean = head
            velocity = (x_t - clean) / np.maximum(t, cfg.t_floor).astype(dt).reshape(B, 1, 1, 1, 1, 1)
        else:
            velocity = head if cfg.prediction == "velocity" else x_t * c_skip + head * c_out
            clean = x_t - velocity * tb

        others = [i for i in range(N) if i != query_index]
        if others:
            ptok = pr[:, others, 0] if len(others) < N else pr[:, :, 0]
            poses = self.pos_head(self.pos_norm(ptok))
        else:
            poses = Tensor(np.zeros((B, 0, 8), dtype=dt))
        return FlowOutput(velocity, clean, poses, x, pr)
