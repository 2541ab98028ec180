"""Toy visual and geometric encoders and the four-stream conditioning bundle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Module, Tensor, TransformerLayer


def patchify_image(img, p: int) -> Tensor:
    """(..., H, W, C) -> (..., (H/p)*(W/p), p*p*C), row-major patches."""
    img = nx.as_tensor(img)
    *lead, H, W, C = img.shape
    if H % p or W % p:
        raise ValueError(f"view {H}x{W} not divisible by patch size {p}")
    x = nx.reshape(img, (*lead, H // p, p, W // p, p, C))
    nl = len(lead)
    x = nx.transpose(x, tuple(range(nl)) + (nl, nl + 2, nl + 1, nl + 3, nl + 4))
    return nx.reshape(x, (*lead, (H // p) * (W // p), p * p * C))


class PatchEmbed(Module):
    def __init__(self, res: int, patch: int, channels: int, dim: int, rng: np.random.Generator):
        if res % patch:
            raise ValueError(f"resolution {res} not divisible by patch {patch}")
        self.patch = patch
        self.res = res
        self.proj = nx.Linear(patch * patch * channels, dim, rng)
        self.pos = nx.normal_param(rng, ((res // patch) ** 2, dim), 0.02)

    @property
    def n_tokens(self) -> int:
        return (self.res // self.patch) ** 2

    def embed(self, img) -> Tensor:
        """Patch embedding alone, before positions are added."""
        return self.proj(patchify_image(img, self.patch))

    def forward(self, img) -> Tensor:
        return self.embed(img) + self.pos


class VisualEncoder(Module):
    """Patch embedding, learned 2-D positions, a short transformer stack."""

    def __init__(self, res: int, patch: int, channels: int, dim: int, heads: int, layers: int,
                 rng: np.random.Generator):
        self.channels = channels
        self.embed = PatchEmbed(res, patch, channels, dim, rng)
        self.layers = [TransformerLayer(dim, heads, rng) for _ in range(layers)]
        self.norm = nx.LayerNorm(dim)

    def forward(self, view, mask=None) -> Tensor:
        view = nx.as_tensor(view)
        if mask is not None:
            view = view * nx.as_tensor(np.asarray(mask, dtype=view.dtype)[..., None])
        x = self.embed(view)
        for layer in self.layers:
            x = layer(x)
        return self.norm(x)

    def encode_mask(self, mask) -> Tensor:
        # binary mask replicated across the image channels
        m = np.asarray(mask, dtype=self.embed.proj.weight.dtype)[..., None]
        return self(np.repeat(m, self.channels, axis=-1))


class GeometricEncoder(Module):
    """Per-view tokens refined by alternating within-view and cross-view attention.

    No view index enters the computation, so the output is equivariant to
    permutations of the input views.
    """

    def __init__(self, res: int, patch: int, channels: int, dim: int, heads: int, layers: int,
                 rng: np.random.Generator):
        self.embed = PatchEmbed(res, patch, channels, dim, rng)
        self.frame = [TransformerLayer(dim, heads, rng) for _ in range(layers)]
        self.cross = [TransformerLayer(dim, heads, rng) for _ in range(layers)]
        self.norm = nx.LayerNorm(dim)

    def forward(self, views) -> Tensor:
        """views: (..., K, H, W, C) -> (..., K, L, dim)."""
        views = nx.as_tensor(views)
        if views.ndim < 4 or views.shape[-4] == 0:
            raise ValueError("geometric encoder needs at least one view")
        x = self.embed(views)
        *lead, K, L, D = x.shape
        for frame, cross in zip(self.frame, self.cross):
            x = frame(x)
            x = nx.reshape(cross(nx.reshape(x, (*lead, K * L, D))), (*lead, K, L, D))
        return self.norm(x)


STREAMS = ("f_asset", "f_mask", "f_global_v", "f_global_geo")


@dataclass
class FeatureBundle:
    """Conditioning streams for one asset, or batched as (B, N, L, C).

    Global streams are shared objects across the assets of a scene; batched
    bundles keep them with a singleton asset axis.
    """

    f_asset: Tensor
    f_mask: Tensor
    f_global_v: Tensor
    f_global_geo: Tensor
    drop_mask: bool = False
    drop_global_v: bool = False
    drop_geo: bool = False

    def streams(self) -> list[Tensor]:
        out = [self.f_asset]
        if not self.drop_mask:
            out.append(self.f_mask)
        if not self.drop_global_v:
            out.append(self.f_global_v)
        if not self.drop_geo:
            out.append(self.f_global_geo)
        return out

    @property
    def f_scene(self) -> Tensor:
        parts = self.streams()
        dims = {p.shape[-1] for p in parts}
        if len(dims) != 1:
            raise ValueError(f"stream feature dims disagree: {sorted(dims)}")
        lead = np.broadcast_shapes(*[p.shape[:-2] for p in parts])
        parts = [p if p.shape[:-2] == lead else nx.expand(p, lead + p.shape[-2:]) for p in parts]
        return nx.concat(parts, axis=-2)

    def with_flags(self, drop_geo=False, drop_global_v=False, drop_mask=False) -> "FeatureBundle":
        return FeatureBundle(self.f_asset, self.f_mask, self.f_global_v, self.f_global_geo,
                             drop_mask=drop_mask, drop_global_v=drop_global_v, drop_geo=drop_geo)


class SceneEncoding:
    """Per-scene global streams, computed once and shared by every asset bundle."""

    def __init__(self, visual: VisualEncoder, geometric: GeometricEncoder, views):
        views = np.asarray(views)
        if views.ndim != 4:
            raise ValueError("views must be (K, H, W, C)")
        self.visual = visual
        self.views = views
        self.global_v = [visual(v) for v in views]
        geo = geometric(views)
        self.global_geo = [geo[k] for k in range(len(views))]

    def bundle(self, mask, view_index: int = 0) -> FeatureBundle:
        return build_bundle(self, mask, view_index)


def build_bundle(enc: SceneEncoding, mask_i, view_index: int = 0) -> FeatureBundle:
    """Four streams for one asset in view ``view_index``."""
    mask_i = np.asarray(mask_i)
    view = enc.views[view_index]
    if mask_i.shape != view.shape[:2]:
        raise ValueError("mask does not match the view it belongs to")
    return FeatureBundle(f_asset=enc.visual(view, mask_i), f_mask=enc.visual.encode_mask(mask_i),
                         f_global_v=enc.global_v[view_index], f_global_geo=enc.global_geo[view_index])


def encode_visual(encoder: VisualEncoder, view, mask=None) -> Tensor:
    return encoder(view, mask)


def encode_geometric(encoder: GeometricEncoder, views) -> list[Tensor]:
    if len(views) == 0:
        raise ValueError("empty view list")
    out = encoder(np.stack([np.asarray(v) for v in views]))
    return [out[k] for k in range(out.shape[0])]


def encode_batch(visual: VisualEncoder, geometric: GeometricEncoder, views, masks,
                 geo_views=None, view_index=None) -> FeatureBundle:
    """Batched bundle.

    views: (B, H, W, C) single view per scene; masks: (B, N, H, W).
    geo_views: optional (B, K, H, W, C) joint set for the geometric stream, in
    which case ``view_index`` (B,) selects each scene's own view within it.
    """
    views = np.asarray(views)
    masks = np.asarray(masks)
    B, N = masks.shape[:2]
    f_asset = visual(views[:, None], masks)  # (B, N, L, C)
    f_mask = visual.encode_mask(masks)
    f_gv = nx.reshape(visual(views), (B, 1, -1, f_asset.shape[-1]))
    if geo_views is None:
        f_geo = geometric(views[:, None])  # (B, 1, L, C)
    else:
        geo = geometric(np.asarray(geo_views))  # (B, K, L, C)
        idx = np.zeros(B, int) if view_index is None else np.asarray(view_index)
        f_geo = nx.reshape(geo[np.arange(B), idx], (B, 1, -1, f_asset.shape[-1]))
    return FeatureBundle(f_asset, f_mask, f_gv, f_geo)
