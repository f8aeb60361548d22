"""Patch embedding, positional encoding and grid-preserving masking."""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from ..autodiff import Tensor, as_tensor, layer_norm, matmul, reshape, transpose, where
from .config import PatchSpec


@dataclass
class TokenGrid:
    """Embedded tokens of a batch: ``tokens`` is [N, N_tok, D].

    ``lattice`` is the token layout (C/t, H/p, W/p) and ``mask`` a boolean
    [N, N_tok] array marking masked tokens.
    """

    tokens: Tensor
    pos: np.ndarray
    lattice: tuple[int, int, int]
    mask: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


def _axis_encoding(positions: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / max(half, 1)))
    angles = positions[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


@functools.lru_cache(maxsize=32)
def _positional_encoding(lattice: tuple[int, int, int], dim: int) -> np.ndarray:
    if dim % 6:
        raise ValueError(f"embed_dim {dim} must be divisible by 6")
    per_axis = dim // 3
    grids = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in lattice), indexing="ij")
    parts = [_axis_encoding(g.reshape(-1), per_axis) for g in grids]
    out = np.concatenate(parts, axis=1)
    out.setflags(write=False)
    return out


def positional_encoding(spec: PatchSpec, dims: tuple[int, int, int]) -> np.ndarray:
    """Fixed sinusoidal encoding [N_tok, D] for an input of dims (C, H, W).

    Channels are split into three equal blocks (channel-token, row, column
    axis), each holding sines followed by cosines.
    """
    return _positional_encoding(spec.lattice(*dims), spec.embed_dim)


def patchify(x, spec: PatchSpec) -> Tensor:
    """[N,C,H,W] -> [N, N_tok, t*p*p] with tokens in (channel, row, col) order."""
    x = as_tensor(x)
    N, C, H, W = x.shape
    a, b, c = spec.lattice(C, H, W)
    t, p = spec.t, spec.p
    y = reshape(x, (N, a, t, b, p, c, p))
    y = transpose(y, (0, 1, 3, 5, 2, 4, 6))
    return reshape(y, (N, a * b * c, t * p * p))


def unpatchify(tokens, spec: PatchSpec, dims: tuple[int, int, int]) -> Tensor:
    """Inverse of :func:`patchify`."""
    tokens = as_tensor(tokens)
    C, H, W = dims
    a, b, c = spec.lattice(C, H, W)
    t, p = spec.t, spec.p
    N = tokens.shape[0]
    y = reshape(tokens, (N, a, b, c, t, p, p))
    y = transpose(y, (0, 1, 4, 2, 5, 3, 6))
    return reshape(y, (N, C, H, W))


def patch_embed(x, proj_w, proj_b, spec: PatchSpec) -> TokenGrid:
    """Linear projection of every t x p x p patch plus positional encodings.

    Accepts a single [C,H,W] sample or an [N,C,H,W] batch.
    """
    x = as_tensor(x)
    if x.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    N, C, H, W = x.shape
    lattice = spec.lattice(C, H, W)
    pos = positional_encoding(spec, (C, H, W)).astype(x.dtype)
    tokens = matmul(patchify(x, spec), proj_w) + proj_b + pos
    return TokenGrid(tokens, pos, lattice, np.zeros(tokens.shape[:2], dtype=bool))


def sample_mask(n_tokens: int, ratio: float, seed=None) -> np.ndarray:
    """Sorted indices of ``round(ratio * n_tokens)`` tokens drawn without replacement.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"mask ratio {ratio} outside [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    k = int(np.floor(ratio * n_tokens + 0.5))
    return np.sort(rng.permutation(n_tokens)[:k])


def mask_from_indices(indices, n_tokens: int) -> np.ndarray:
    m = np.zeros(n_tokens, dtype=bool)
    m[np.asarray(indices, dtype=np.int64)] = True
    return m


def apply_mask(tg: TokenGrid, mask: np.ndarray, mask_token, norm_g, norm_b) -> TokenGrid:
    """Replace masked tokens by the layer-normalized mask embedding plus positions.

    ``mask`` is a boolean [N, N_tok] (or [N_tok], shared by the batch) array.
    Unmasked tokens pass through unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = np.broadcast_to(mask, tg.tokens.shape[:2])
    if mask.shape != tg.tokens.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match tokens {tg.tokens.shape[:2]}")
    filler = layer_norm(reshape(mask_token, (1, -1)), norm_g, norm_b) + tg.pos
    tokens = where(mask[..., None], reshape(filler, (1,) + filler.shape), tg.tokens)
    return TokenGrid(tokens, tg.pos, tg.lattice, mask.copy())


def restore(tg: TokenGrid, restore_w, restore_b, spec: PatchSpec,
            dims: tuple[int, int, int]) -> Tensor:
    """Project tokens back to patches and reassemble the [N, C, H, W] grid."""
    return unpatchify(matmul(tg.tokens, restore_w) + restore_b, spec, dims)


def pixel_mask(mask: np.ndarray, spec: PatchSpec, dims: tuple[int, int, int]) -> np.ndarray:
    """Expand a token mask [N, N_tok] to a boolean pixel mask [N, C, H, W]."""
    mask = np.asarray(mask, dtype=bool)
    C, H, W = dims
    a, b, c = spec.lattice(C, H, W)
    m = mask.reshape(-1, a, b, c)
    m = np.repeat(np.repeat(np.repeat(m, spec.t, axis=1), spec.p, axis=2), spec.p, axis=3)
    return m
