"""Greyscale PGM output for reconstructions and class maps."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._binary import atomic_write
from .autodiff import no_grad
from .model import forward_reconstruction, mask_from_indices, sample_mask
from .training import Checkpoint

MASK_SENTINEL = -100.0
DISPLAY_RANGE = (-10.0, 10.0)


def pgm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError("PGM images must be 2-D uint8 arrays")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    atomic_write(path, pgm_bytes(image))


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5" or parts[3] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = int(parts[1]), int(parts[2])
    data = np.frombuffer(parts[4], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: pixel payload has {data.size} bytes, expected {w * h}")
    return data.reshape(h, w)


def to_grey(values: np.ndarray, lo: float = DISPLAY_RANGE[0], hi: float = DISPLAY_RANGE[1]) -> np.ndarray:
    """Clip to [lo, hi] and map linearly onto 0..255 (lo is black)."""
    v = np.clip(np.asarray(values, dtype=np.float64), lo, hi)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


def class_map_grey(classes: np.ndarray, n_classes: int) -> np.ndarray:
    c = np.asarray(classes, dtype=np.int64)
    return np.rint(c * (255.0 / max(n_classes - 1, 1))).astype(np.uint8)


@dataclass
class DemoReport:
    sample: int
    mask_ratio: float
    masked_pixels: int
    masked_mae: float | None
    overall_mae: float
    files: list[str]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def reconstruct_demo(ckpt: Checkpoint, variables: np.ndarray, names: list[str], sample: int,
                     mask_ratio: float, out_dir, seed: int = 0) -> DemoReport:
    """Write original / masked / reconstructed PGM panels for every variable."""
    if not 0 <= sample < len(variables):
        raise IndexError(f"sample index {sample} outside 0..{len(variables) - 1}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = ckpt.store["embed.proj.w"].dtype
    x = np.asarray(variables[sample:sample + 1], dtype=dtype)
    n_tokens = ckpt.model.patch.n_tokens(*x.shape[1:])
    token_mask = mask_from_indices(sample_mask(n_tokens, mask_ratio, seed), n_tokens)[None]
    with no_grad():
        x_hat, pm = forward_reconstruction(x, ckpt.store, ckpt.model, token_mask)
    x, x_hat, pm = x[0].astype(np.float64), x_hat.data[0].astype(np.float64), pm[0]
    masked = np.where(pm, MASK_SENTINEL, x)
    err = np.abs(x_hat - x)
    files = []
    for c, name in enumerate(names):
        for panel, data in (("original", x[c]), ("masked", masked[c]), ("reconstruction", x_hat[c])):
            fname = f"{c:02d}_{_safe(name)}_{panel}.pgm"
            write_pgm(out / fname, to_grey(data))
            files.append(fname)
    report = DemoReport(sample, float(mask_ratio), int(pm.sum()),
                        float(err[pm].mean()) if pm.any() else None, float(err.mean()), files)
    atomic_write(out / "report.json", (json.dumps(report.to_dict(), indent=2) + "\n").encode())
    return report


def _safe(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in name)
