"""Dynamic sparse kernel block (reduced-scale deformable aggregation).

Each pixel and channel group predicts K sampling offsets around a fixed
base grid and K modulation logits; features are bilinearly sampled at the
shifted points and combined with softmax-normalized weights.
"""
from __future__ import annotations

import functools

import numpy as np

from ..autodiff import (Tensor, bilinear_sample, conv2d, gelu, layer_norm, reshape, softmax,
                        transpose)


@functools.lru_cache(maxsize=None)
def base_offsets(points: int) -> np.ndarray:
    """The ``points`` integer offsets nearest the origin on a square grid, [K, 2].

    For K = 9 this is the 3 x 3 neighbourhood in row-major order.
    """
    side = int(np.ceil(np.sqrt(points)))
    side += 1 - side % 2
    r = side // 2
    cand = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)]
    cand.sort(key=lambda o: (max(abs(o[0]), abs(o[1])), o[0] * o[0] + o[1] * o[1]))
    chosen = sorted(cand[:points])
    out = np.asarray(chosen, dtype=np.float64)
    out.setflags(write=False)
    return out


@functools.lru_cache(maxsize=32)
def _base_coords(height: int, width: int, points: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    grid = np.stack([yy, xx], axis=-1).astype(np.float64)  # [H,W,2]
    out = grid[:, :, None, :] + base_offsets(points)[None, None]  # [H,W,K,2]
    out.setflags(write=False)
    return out


def deformable_aggregate(features, offsets, modulation, points: int, groups: int) -> Tensor:
    """Modulated sum of bilinear samples.

    ``features`` [N,C,H,W]; ``offsets`` [N, G*K*2, H, W] laid out as (group,
    point, yx); ``modulation`` [N, G*K, H, W] holds weights already normalized
    over K.
    """
    N, C, H, W = features.shape
    G, K = groups, points
    if C % G:
        raise ValueError(f"groups={G} does not divide channels={C}")
    cg = C // G
    off = reshape(offsets, (N, G, K, 2, H, W))
    off = transpose(off, (0, 1, 4, 5, 2, 3))  # [N,G,H,W,K,2]
    coords = off + _base_coords(H, W, K).astype(features.dtype)
    coords = reshape(coords, (N * G, H * W * K, 2))
    fmap = reshape(features, (N * G, cg, H, W))
    samples = bilinear_sample(fmap, coords)  # [N*G, cg, H*W*K]
    mod = reshape(modulation, (N, G, K, H, W))
    mod = transpose(mod, (0, 1, 3, 4, 2))
    mod = reshape(mod, (N * G, 1, H * W * K))
    agg = reshape(samples * mod, (N * G, cg, H * W, K)).sum(axis=-1)
    return reshape(agg, (N, C, H, W))


def dsk_block(features, params, prefix: str, points: int, groups: int) -> Tensor:
    """One encoder block: deformable aggregation, projection, norm, residual, MLP.

    ``params`` maps parameter names to tensors; names are ``prefix`` plus
    ``.offset``, ``.mod``, ``.proj``, ``.norm``, ``.mlp1``, ``.mlp2``.
    """
    x = features
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    N, C, H, W = x.shape
    if C % groups:
        raise ValueError(f"groups={groups} does not divide channels={C}")
    p = lambda name: params[f"{prefix}.{name}"]
    offsets = conv2d(x, p("offset.w"), p("offset.b"))
    logits = reshape(conv2d(x, p("mod.w"), p("mod.b")), (N, groups, points, H, W))
    mod = reshape(softmax(logits, axis=2), (N, groups * points, H, W))
    agg = deformable_aggregate(x, offsets, mod, points, groups)
    y = layer_norm(conv2d(agg, p("proj.w"), p("proj.b")), p("norm.g"), p("norm.b"), axis=1)
    x = x + y
    x = x + conv2d(gelu(conv2d(x, p("mlp1.w"), p("mlp1.b"))), p("mlp2.w"), p("mlp2.b"))
    return reshape(x, x.shape[1:]) if squeeze else x
