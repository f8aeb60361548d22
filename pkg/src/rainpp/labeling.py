"""Rainfall classes, continuous label smoothing and class weighting.

Classes are half-open rainfall intervals: with thresholds ``r_0 < ... < r_{m-2}``
class 0 is ``[0, r_0)``, class ``j`` is ``[r_{j-1}, r_j)`` and class ``m-1`` is
``[r_{m-2}, inf)``.

Continuous labels keep values below ``r_0`` and at or above ``r_{m-2}`` hard.
A value ``v`` in ``[r_j, r_{j+1})`` splits its mass between class ``j+1``
(share ``(r_{j+1} - v) / (r_{j+1} - r_j)``) and class ``j+2`` (the rest), so the
vector moves continuously from one hard label to the next as ``v`` crosses
the interval.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binary import Reader, atomic_write, check_elements
from .errors import ConfigError, VersionMismatchError

LABEL_MAGIC = b"NWPL"
LABEL_VERSION = 1
QPE_MAX = 100.0


@dataclass(frozen=True)
class ThresholdSet:
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        object.__setattr__(self, "values", vals)
        if not vals:
            raise ConfigError("threshold set needs at least one threshold")
        if vals[0] <= 0:
            raise ConfigError(f"thresholds must be positive, got {vals}")
        if any(b <= a for a, b in zip(vals, vals[1:])):
            raise ConfigError(f"thresholds must be strictly increasing, got {vals}")

    @classmethod
    def parse(cls, text: str) -> "ThresholdSet":
        try:
            return cls(tuple(float(t) for t in text.split(",") if t.strip()))
        except ValueError as exc:
            raise ConfigError(f"cannot parse thresholds {text!r}") from exc

    @property
    def n_classes(self) -> int:
        return len(self.values) + 1

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


def _thresholds(gamma) -> ThresholdSet:
    return gamma if isinstance(gamma, ThresholdSet) else ThresholdSet(tuple(gamma))


def classify(v, gamma):
    """Hard class index of rainfall ``v`` (scalar or array)."""
    r = _thresholds(gamma).as_array()
    arr = np.asarray(v, dtype=np.float64)
    if np.any(arr < 0):
        raise ValueError("rainfall values must be non-negative")
    out = np.searchsorted(r, arr, side="right")
    return int(out) if out.ndim == 0 else out


def _check_domain(arr: np.ndarray, clip: bool) -> np.ndarray:
    if clip:
        return np.clip(arr, 0.0, np.nextafter(QPE_MAX, 0))
    if np.any(arr < 0) or np.any(arr >= QPE_MAX):
        bad = arr[(arr < 0) | (arr >= QPE_MAX)].ravel()[0]
        raise ValueError(f"rainfall value {bad} outside [0, 100)")
    return arr


def smooth_labels(values, gamma, clip: bool = False) -> np.ndarray:
    """Vectorized continuous labels: result has shape ``values.shape + (m,)``."""
    ts = _thresholds(gamma)
    r = ts.as_array()
    m = ts.n_classes
    v = _check_domain(np.asarray(values, dtype=np.float64), clip)
    out = np.zeros(v.shape + (m,), dtype=np.float64)
    flat_v = v.reshape(-1)
    flat = out.reshape(-1, m)
    rows = np.arange(flat_v.size)

    low = flat_v < r[0]
    high = flat_v >= r[-1]
    flat[rows[low], 0] = 1.0
    flat[rows[high], m - 1] = 1.0
    mid = ~(low | high)
    if mid.any():
        vm = flat_v[mid]
        j = np.searchsorted(r, vm, side="right") - 1
        lo, hi = r[j], r[j + 1]
        upper = (vm - lo) / (hi - lo)
        lower = (hi - vm) / (hi - lo)
        # derive the smaller share from the larger one so the pair sums to 1 exactly
        big_upper = upper >= 0.5
        lower = np.where(big_upper, 1.0 - upper, lower)
        upper = np.where(big_upper, upper, 1.0 - lower)
        flat[rows[mid], j + 1] = lower
        flat[rows[mid], j + 2] = upper
    return out


def smooth_label(v: float, gamma, clip: bool = False) -> np.ndarray:
    """Continuous label vector (length m) for one rainfall value."""
    return smooth_labels(np.asarray(float(v)), gamma, clip)


def smooth_field(qpe, gamma, clip: bool = False) -> np.ndarray:
    """Per-pixel continuous labels: [H,W] -> [m,H,W] or [N,H,W] -> [N,m,H,W]."""
    q = np.asarray(qpe)
    p = smooth_labels(q, gamma, clip)
    return np.moveaxis(p, -1, -3)


def hard_field(qpe, gamma) -> np.ndarray:
    """One-hot labels in the same layout as :func:`smooth_field`."""
    ts = _thresholds(gamma)
    cls = classify(np.asarray(qpe), ts)
    onehot = np.eye(ts.n_classes)[cls]
    return np.moveaxis(onehot, -1, -3)


def collapse(p: np.ndarray, axis: int = -3) -> np.ndarray:
    """Argmax over classes; ties resolve to the lower class index."""
    return np.argmax(p, axis=axis)


def class_histogram(qpe, gamma) -> np.ndarray:
    ts = _thresholds(gamma)
    return np.bincount(np.asarray(classify(np.asarray(qpe), ts)).ravel(),
                       minlength=ts.n_classes).astype(np.float64)


def class_weights(histogram: Sequence[float], scheme: str = "inverse-frequency") -> np.ndarray:
    """Per-class loss weights with mean 1.

    ``inverse-frequency`` uses ``total / (m * count_j)``; an empty class
    receives the largest weight among the non-empty ones.
    """
    counts = np.asarray(histogram, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("histogram needs one count per class (at least 2)")
    if np.any(counts < 0) or counts.sum() <= 0:
        raise ValueError("class counts must be non-negative with a positive total")
    if scheme == "uniform":
        return np.ones_like(counts)
    if scheme != "inverse-frequency":
        raise ConfigError(f"unknown class-weight scheme {scheme!r}")
    m = counts.size
    w = np.zeros_like(counts)
    nz = counts > 0
    w[nz] = counts.sum() / (m * counts[nz])
    w[~nz] = w[nz].max()
    return w / w.mean()


def label_proportions(qpe, gamma, smoothed: bool = False) -> np.ndarray:
    """Per-class pixel fractions.

    Hard mode counts each pixel's class. Smoothed mode counts, per class, the
    pixels whose continuous label gives that class non-zero probability, so
    the fractions may sum to more than 1.
    """
    q = np.asarray(getattr(qpe, "qpe", qpe))
    if q.size == 0:
        raise ValueError("label proportions need a non-empty dataset")
    ts = _thresholds(gamma)
    if not smoothed:
        return class_histogram(q, ts) / q.size
    p = smooth_labels(q, ts)
    return (p > 0).reshape(-1, ts.n_classes).mean(axis=0)


# -- label file --------------------------------------------------------
def store_labels(labels: np.ndarray, path) -> None:
    """Write [N, m, H, W] label planes as ``"NWPL" u32 version, N, m, H, W`` + f32 data."""
    arr = np.asarray(labels)
    if arr.ndim != 4:
        raise ValueError(f"labels must be [N,m,H,W], got {arr.shape}")
    header = LABEL_MAGIC + struct.pack("<5I", LABEL_VERSION, *arr.shape)
    atomic_write(path, header + arr.astype("<f4").tobytes())


def load_labels(path) -> np.ndarray:
    r = Reader(Path(path).read_bytes(), what=str(path))
    r.magic(LABEL_MAGIC)
    version = r.u32()
    if version != LABEL_VERSION:
        raise VersionMismatchError(f"{path}: label format version {version}, expected {LABEL_VERSION}")
    dims = tuple(r.u32() for _ in range(4))
    count = check_elements(str(path), *dims)
    data = r.array("<f4", count).reshape(dims)
    r.finish()
    return data
