"""Differentiable neural-network primitives on top of :mod:`rainpp.autodiff.tensor`."""
from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_node, reshape, transpose, unbroadcast


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")
    return x, False


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - kernel
    if span < 0 or span % stride:
        raise ValueError(
            f"non-divisible conv geometry: size={size}, kernel={kernel}, stride={stride}, pad={pad}"
        )
    return span // stride + 1


def conv2d(x, weight, bias=None, stride: int = 1, pad: int | None = None) -> Tensor:
    """2-D cross-correlation.

    ``x`` is [C,H,W] or [N,C,H,W], ``weight`` is [O,C,kh,kw]. When ``pad`` is
    None the kernel must be odd and "same" padding is used.
    """
    x, squeeze = _batched(as_tensor(x))
    weight = as_tensor(weight)
    O, C, kh, kw = weight.shape
    N, Cx, H, W = x.shape
    if C != Cx:
        raise ValueError(f"conv2d channel mismatch: input {Cx}, kernel {C}")
    if pad is None:
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("even kernel sizes need an explicit pad")
        if kh != kw:
            raise ValueError("implicit padding needs a square kernel")
        pad = kh // 2
    Ho = conv_output_size(H, kh, stride, pad)
    Wo = conv_output_size(W, kw, stride, pad)
    xd, wd = x.data, weight.data

    if kh == 1 and kw == 1 and pad == 0:
        xs = xd[:, :, ::stride, ::stride]
        w2 = wd.reshape(O, C)
        out = np.einsum("oc,nchw->nohw", w2, xs, optimize=True)

        def _bw(g):
            gw = np.einsum("nohw,nchw->oc", g, xs, optimize=True).reshape(wd.shape)
            gx = None
            if x.requires_grad:
                gxs = np.einsum("oc,nohw->nchw", w2, g, optimize=True)
                if stride == 1:
                    gx = gxs
                else:
                    gx = np.zeros_like(xd)
                    gx[:, :, ::stride, ::stride] = gxs
            return gx, gw
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)

        def _bw(g):
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gx = None
            if x.requires_grad:
                cols = np.tensordot(g, wd, axes=([1], [0]))  # [N,Ho,Wo,C,kh,kw]
                gxp = np.zeros(xp.shape, dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                            cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            return gx, gw

    out = np.ascontiguousarray(out, dtype=xd.dtype)
    res = make_node(out, (x, weight), _bw, "conv2d")
    if bias is not None:
        bias = as_tensor(bias)
        res = res + reshape(bias, (1, O, 1, 1))
    if squeeze:
        res = reshape(res, res.shape[1:])
    return res


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), _bw, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def _bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), _bw, "log_softmax")


def layer_norm(x, gamma, beta, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalize over one axis, then apply the per-feature affine map."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"gamma/beta must have shape ({n},)")
    bshape = [1] * x.ndim
    bshape[axis] = n
    gd = gamma.data.reshape(bshape)
    bd = beta.data.reshape(bshape)
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gd + bd
    other = tuple(i for i in range(x.ndim) if i != axis)

    def _bw(g):
        ggamma = (g * xhat).sum(axis=other)
        gbeta = g.sum(axis=other)
        dxhat = g * gd
        gx = rstd * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                     - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return gx, ggamma, gbeta

    return make_node(out.astype(xd.dtype), (x, gamma, beta), _bw, "layer_norm")


def bilinear_sample(fmap, coords) -> Tensor:
    """Bilinear interpolation of ``fmap`` at real-valued (y, x) positions.

    ``fmap`` is [C,H,W] with ``coords`` [K,2] (result [C,K]), or
    [N,C,H,W] with ``coords`` [N,K,2] (result [N,C,K]). Positions outside
    the grid are clamped to the border; the coordinate gradient is zero
    wherever clamping is active.
    """
    fmap, coords = as_tensor(fmap), as_tensor(coords)
    squeeze = fmap.ndim == 3
    md = fmap.data[None] if squeeze else fmap.data
    cd = coords.data[None] if squeeze else coords.data
    if md.ndim != 4 or cd.ndim != 3 or cd.shape[-1] != 2 or cd.shape[0] != md.shape[0]:
        raise ValueError(f"bad shapes for bilinear_sample: map {fmap.shape}, coords {coords.shape}")
    N, C, H, W = md.shape
    K = cd.shape[1]
    y = cd[..., 0]
    x = cd[..., 1]
    yc = np.clip(y, 0, H - 1)
    xc = np.clip(x, 0, W - 1)
    in_y = (y >= 0) & (y <= H - 1)
    in_x = (x >= 0) & (x <= W - 1)
    y0 = np.floor(yc).astype(np.int64)
    x0 = np.floor(xc).astype(np.int64)
    if H > 1:
        y0 = np.minimum(y0, H - 2)
    if W > 1:
        x0 = np.minimum(x0, W - 2)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (yc - y0).astype(md.dtype)
    wx = (xc - x0).astype(md.dtype)

    flat = md.reshape(N, C, H * W)
    idx = [y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1]
    v00, v01, v10, v11 = (np.take_along_axis(flat, i[:, None, :], axis=2) for i in idx)
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    weights = [w00, w01, w10, w11]
    out = (v00 * w00[:, None] + v01 * w01[:, None] + v10 * w10[:, None] + v11 * w11[:, None])

    def _bw(g):
        gb = g[None] if squeeze else g
        gmap = None
        if fmap.requires_grad:
            base = (np.arange(N * C, dtype=np.int64) * (H * W)).reshape(N, C, 1)
            flat_idx = np.concatenate([(base + i[:, None, :]).ravel() for i in idx])
            vals = np.concatenate([(gb * w[:, None]).ravel() for w in weights])
            gmap = np.bincount(flat_idx, weights=vals, minlength=N * C * H * W)
            gmap = gmap.astype(md.dtype).reshape(N, C, H, W)
            if squeeze:
                gmap = gmap[0]
        gcoord = None
        if coords.requires_grad:
            dy = ((1 - wx)[:, None] * (v10 - v00) + wx[:, None] * (v11 - v01))
            dx = ((1 - wy)[:, None] * (v01 - v00) + wy[:, None] * (v11 - v10))
            gy = (gb * dy).sum(axis=1) * in_y
            gx = (gb * dx).sum(axis=1) * in_x
            gcoord = np.stack([gy, gx], axis=-1).astype(cd.dtype)
            if squeeze:
                gcoord = gcoord[0]
        return gmap, gcoord

    out = out[0] if squeeze else out
    return make_node(np.ascontiguousarray(out), (fmap, coords), _bw, "bilinear_sample")


@functools.lru_cache(maxsize=None)
def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation matrix [n_out, n_in] for half-pixel-aligned bilinear resize."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    m.setflags(write=False)
    return m


@functools.lru_cache(maxsize=None)
def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Averaging matrix [n_out, n_in] with floor/ceil bin edges."""
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        start = (i * n_in) // n_out
        stop = -((-(i + 1) * n_in) // n_out)
        m[i, start:stop] = 1.0 / (stop - start)
    m.setflags(write=False)
    return m


def resize2d(x, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Apply fixed linear maps to the last two axes: ``rows @ x @ cols.T``."""
    x = as_tensor(x)
    r = rows.astype(x.dtype)
    c = cols.astype(x.dtype)
    out = r @ x.data @ c.T
    return make_node(out, (x,), lambda g: (r.T @ g @ c,), "resize2d")


def upsample_bilinear(x, size: tuple[int, int]) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x
    return resize2d(x, bilinear_matrix(h, size[0]), bilinear_matrix(w, size[1]))


def adaptive_avg_pool(x, bins: int) -> Tensor:
    x = as_tensor(x)
    h, w = x.shape[-2:]
    return resize2d(x, adaptive_pool_matrix(h, bins), adaptive_pool_matrix(w, bins))


def pixel_shuffle(x, factor: int) -> Tensor:
    """[N, C*r*r, H, W] -> [N, C, H*r, W*r]."""
    x = as_tensor(x)
    N, Cr, H, W = x.shape
    C = Cr // (factor * factor)
    t = reshape(x, (N, C, factor, factor, H, W))
    t = transpose(t, (0, 1, 4, 2, 5, 3))
    return reshape(t, (N, C, H * factor, W * factor))


def cross_entropy(logits, target_probs, weights=None, axis: int = 1) -> Tensor:
    """Mean over positions of ``-sum_j w_j p_j log softmax(logits)_j``."""
    logits = as_tensor(logits)
    logp = log_softmax(logits, axis=axis)
    p = np.asarray(target_probs, dtype=logits.dtype)
    if weights is not None:
        shape = [1] * logits.ndim
        shape[axis] = -1
        p = p * np.asarray(weights, dtype=logits.dtype).reshape(shape)
    per = -(logp * Tensor(p)).sum(axis=axis)
    return per.mean()


__all__ = [
    "conv2d", "softmax", "log_softmax", "layer_norm", "bilinear_sample", "resize2d",
    "upsample_bilinear", "adaptive_avg_pool", "pixel_shuffle", "cross_entropy",
    "bilinear_matrix", "adaptive_pool_matrix", "conv_output_size", "unbroadcast",
]
