"""Hierarchical encoder plus reconstruction and segmentation heads."""
from __future__ import annotations

import numpy as np

from ..autodiff import (Tensor, adaptive_avg_pool, as_tensor, concat, conv2d, gelu, layer_norm,
                        pixel_shuffle, upsample_bilinear)
from .config import ModelConfig
from .dsk import dsk_block
from .embedding import apply_mask, patch_embed, pixel_mask, restore
from .params import ParameterStore


def _conv(store, name, x, stride=1, pad=None):
    return conv2d(x, store[f"{name}.w"], store[f"{name}.b"], stride=stride, pad=pad)


def masked_input(x, store: ParameterStore, cfg: ModelConfig, token_mask=None):
    """Embed, mask and restore a batch to grid form.

    Returns the restored input [N, C, H, W] and the boolean pixel mask.
    ``token_mask`` is a boolean [N, N_tok] array (None masks nothing).
    """
    x = as_tensor(x)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    dims = x.shape[1:]
    tg = patch_embed(x, store["embed.proj.w"], store["embed.proj.b"], cfg.patch)
    if token_mask is None:
        token_mask = np.zeros(tg.tokens.shape[:2], dtype=bool)
    tg = apply_mask(tg, token_mask, store["embed.mask_token"],
                    store["embed.mask_norm.g"], store["embed.mask_norm.b"])
    xr = restore(tg, store["embed.restore.w"], store["embed.restore.b"], cfg.patch, dims)
    return xr, pixel_mask(tg.mask, cfg.patch, dims)


def encode(x_restored, store: ParameterStore, cfg: ModelConfig) -> tuple[list[Tensor], Tensor]:
    """Run the stages; each halves the resolution. Returns (pyramid, latent z [N, d])."""
    h = as_tensor(x_restored)
    if h.ndim == 3:
        h = h.reshape((1,) + h.shape)
    pyramid = []
    for s, (blocks, _) in enumerate(cfg.stages):
        h = _conv(store, f"enc.s{s}.down", h, stride=2, pad=0)
        h = layer_norm(h, store[f"enc.s{s}.down_norm.g"], store[f"enc.s{s}.down_norm.b"], axis=1)
        for b in range(blocks):
            h = dsk_block(h, store, f"enc.s{s}.b{b}", cfg.points, cfg.groups)
        pyramid.append(h)
    z = h.mean(axis=(2, 3))
    return pyramid, z


def reconstruct(pyramid: list[Tensor], store: ParameterStore, cfg: ModelConfig) -> Tensor:
    """Fuse all levels at the finest resolution and map back to [N, C, H, W]."""
    size = pyramid[0].shape[-2:]
    fused = None
    for s, f in enumerate(pyramid):
        lat = upsample_bilinear(_conv(store, f"rec.lat{s}", f), size)
        fused = lat if fused is None else fused + lat
    h = gelu(_conv(store, "rec.fuse", gelu(fused)))
    return pixel_shuffle(_conv(store, "rec.out", h), 2)


def segment(pyramid: list[Tensor], store: ParameterStore, cfg: ModelConfig,
            out_size: tuple[int, int]) -> Tensor:
    """Pyramid-pooling + top-down fusion head producing logits [N, m, H, W]."""
    top = pyramid[-1]
    top_size = top.shape[-2:]
    pooled = [top]
    for b in cfg.pool_bins:
        branch = gelu(_conv(store, f"seg.ppm{b}", adaptive_avg_pool(top, b)))
        pooled.append(upsample_bilinear(branch, top_size))
    levels = [None] * len(pyramid)
    levels[-1] = gelu(_conv(store, "seg.bottleneck", concat(pooled, axis=1)))
    for s in range(len(pyramid) - 2, -1, -1):
        lat = gelu(_conv(store, f"seg.lat{s}", pyramid[s]))
        levels[s] = lat + upsample_bilinear(levels[s + 1], lat.shape[-2:])
    outs = [gelu(_conv(store, f"seg.fpn{s}", levels[s])) for s in range(len(pyramid) - 1)]
    outs.append(levels[-1])
    fuse_level = min(1, len(pyramid) - 1)
    fuse_size = pyramid[fuse_level].shape[-2:]
    fused = concat([upsample_bilinear(o, fuse_size) for o in outs], axis=1)
    h = gelu(_conv(store, "seg.fuse", fused))
    return upsample_bilinear(_conv(store, "seg.cls", h), tuple(out_size))


def forward_reconstruction(x, store, cfg, token_mask=None):
    xr, pm = masked_input(x, store, cfg, token_mask)
    pyramid, _ = encode(xr, store, cfg)
    return reconstruct(pyramid, store, cfg), pm


def forward_segmentation(x, store, cfg, token_mask=None):
    x = as_tensor(x)
    xr, _ = masked_input(x, store, cfg, token_mask)
    pyramid, _ = encode(xr, store, cfg)
    return segment(pyramid, store, cfg, x.shape[-2:])
