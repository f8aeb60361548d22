"""Gridded NWP samples: container types, binary file format, normalization and
synthetic generation.

A dataset holds ``variables`` as one float32 array [N, C, H, W] and QPE
targets as [N, H, W] in mm/h. The on-disk layout (``.nwpg``) is::

    "NWPG" u32 version u32 samples u32 C u32 H u32 W
    C x (u16 len + UTF-8 variable name)
    per sample: u16 len + UTF-8 timestamp, C*H*W f32 variables, H*W f32 qpe

All integers and floats are little-endian.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._binary import Reader, atomic_write, check_elements, pack_string16
from .errors import ConfigError, VersionMismatchError

GRID_MAGIC = b"NWPG"
GRID_VERSION = 1
QPE_MAX = 100.0
DEFAULT_THRESHOLDS = (0.1, 10.0)
SPECTRAL_EXPONENT = -4.0

_BASE_NAMES = (
    "t850", "t700", "t500", "q850", "q700", "q500", "u850", "u500",
    "v850", "v500", "rh850", "rh700", "w850", "w700", "z850", "z500",
)


def default_variable_names(n_channels: int) -> list[str]:
    names = list(_BASE_NAMES[:n_channels])
    names += [f"x{i}_sfc" for i in range(len(names), n_channels)]
    return names


@dataclass(frozen=True)
class GridSample:
    variables: np.ndarray  # [C, H, W]
    qpe: np.ndarray  # [H, W], mm/h
    timestamp: str


@dataclass
class GridDataset:
    variables: np.ndarray  # [N, C, H, W] float32
    qpe: np.ndarray  # [N, H, W] float32
    names: list[str]
    timestamps: list[str] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        self.variables = np.ascontiguousarray(self.variables, dtype=np.float32)
        self.qpe = np.ascontiguousarray(self.qpe, dtype=np.float32)
        self.names = list(self.names)
        if self.variables.ndim != 4:
            raise ValueError(f"variables must be [N,C,H,W], got {self.variables.shape}")
        n, c, h, w = self.variables.shape
        if self.qpe.shape != (n, h, w):
            raise ValueError(f"qpe shape {self.qpe.shape} does not match variables {self.variables.shape}")
        if len(self.names) != c:
            raise ValueError(f"{len(self.names)} variable names for {c} channels")
        if not self.timestamps:
            self.timestamps = [f"sample-{i:06d}" for i in range(n)]
        if len(self.timestamps) != n:
            raise ValueError("one timestamp per sample is required")
        if n and (self.qpe.min() < 0 or self.qpe.max() >= QPE_MAX):
            raise ValueError("qpe values must lie in [0, 100)")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.variables.shape[1:])

    def __len__(self) -> int:
        return self.variables.shape[0]

    def __getitem__(self, i: int) -> GridSample:
        return GridSample(self.variables[i], self.qpe[i], self.timestamps[i])

    def subset(self, indices: Sequence[int]) -> "GridDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return GridDataset(self.variables[idx], self.qpe[idx], self.names,
                           [self.timestamps[i] for i in idx], self.provenance)

    def with_variables(self, variables: np.ndarray) -> "GridDataset":
        return GridDataset(variables, self.qpe, self.names, self.timestamps, self.provenance)

    def equals(self, other: "GridDataset") -> bool:
        return (self.names == other.names and self.timestamps == other.timestamps
                and self.variables.shape == other.variables.shape
                and np.array_equal(self.variables, other.variables)
                and np.array_equal(self.qpe, other.qpe))


# -- normalization -----------------------------------------------------
@dataclass
class NormStats:
    names: list[str]
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if not (len(self.names) == self.mean.size == self.std.size):
            raise ValueError("names, mean and std must have equal length")
        if np.any(self.std <= 0):
            raise ValueError("every channel std must be positive")

    def to_dict(self) -> dict:
        return {n: {"mean": float(m), "std": float(s)}
                for n, m, s in zip(self.names, self.mean, self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        names = list(d)
        return cls(names, [d[n]["mean"] for n in names], [d[n]["std"] for n in names])

    def save(self, path) -> None:
        atomic_write(path, (json.dumps(self.to_dict(), indent=2) + "\n").encode())

    @classmethod
    def load(cls, path) -> "NormStats":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_stats(dataset: GridDataset) -> NormStats:
    """Exact per-channel mean and population std over all samples and pixels."""
    if len(dataset) == 0:
        raise ValueError("cannot compute statistics of an empty dataset")
    v = dataset.variables.astype(np.float64)
    mean = v.mean(axis=(0, 2, 3))
    std = v.std(axis=(0, 2, 3))
    bad = [dataset.names[i] for i in np.flatnonzero(std < 1e-12)]
    if bad:
        raise ValueError(f"zero-variance channel(s): {', '.join(bad)}")
    return NormStats(dataset.names, mean, std)


def _aligned(dataset: GridDataset, stats: NormStats) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, std) broadcastable to [N, C, H, W], matched by channel name.

    Stats whose names differ from the dataset's fall back to positional order.
    """
    if stats.mean.size != dataset.variables.shape[1]:
        raise ValueError(f"stats have {stats.mean.size} channels, dataset has {dataset.variables.shape[1]}")
    mean, std = stats.mean, stats.std
    if stats.names != dataset.names and sorted(stats.names) == sorted(dataset.names):
        order = [stats.names.index(n) for n in dataset.names]
        mean, std = mean[order], std[order]
    return mean[None, :, None, None], std[None, :, None, None]


def normalize(dataset: GridDataset, stats: NormStats) -> GridDataset:
    m, s = _aligned(dataset, stats)
    return dataset.with_variables((dataset.variables.astype(np.float64) - m) / s)


def denormalize(dataset: GridDataset, stats: NormStats) -> GridDataset:
    m, s = _aligned(dataset, stats)
    return dataset.with_variables(dataset.variables.astype(np.float64) * s + m)


# -- synthetic generation ----------------------------------------------
def spectral_fields(rng: np.random.Generator, count: int, height: int, width: int,
                    exponent: float = SPECTRAL_EXPONENT) -> np.ndarray:
    """Standardized periodic Gaussian random fields with power spectrum ~ |k|**exponent."""
    noise = rng.standard_normal((count, height, width))
    ky = np.fft.fftfreq(height)[:, None]
    kx = np.fft.rfftfreq(width)[None, :]
    k = np.sqrt(ky ** 2 + kx ** 2)
    amp = np.zeros_like(k)
    amp[k > 0] = k[k > 0] ** (exponent / 2.0)
    fields = np.fft.irfft2(np.fft.rfft2(noise) * amp, s=(height, width))
    fields -= fields.mean(axis=(1, 2), keepdims=True)
    fields /= fields.std(axis=(1, 2), keepdims=True)
    return fields


def check_proportions(proportions: Sequence[float], n_classes: int) -> np.ndarray:
    p = np.asarray(proportions, dtype=np.float64)
    if p.shape != (n_classes,):
        raise ConfigError(f"expected {n_classes} class proportions, got {len(p)}")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError(f"class proportions must be non-negative and sum to 1, got {list(p)}")
    if np.any(np.diff(p[1:]) > 0):
        raise ConfigError(
            f"unattainable proportions {list(p)}: heavier rain classes cannot outnumber lighter ones")
    return p


def _class_intervals(thresholds: Sequence[float]) -> list[tuple[float, float]]:
    r = [float(t) for t in thresholds]
    top = r[-1] + min(7.0 * r[-1], 0.8 * (QPE_MAX - r[-1]))
    edges = [0.0] + r + [top]
    # shrink each interval so float32 rounding cannot cross a threshold
    return [(lo, lo + (hi - lo) * 0.999) for lo, hi in zip(edges[:-1], edges[1:])]


def rescale_to_proportions(score: np.ndarray, proportions: Sequence[float],
                           thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> np.ndarray:
    """Monotone map of a non-negative score field onto mm values whose class
    fractions at ``thresholds`` match ``proportions``."""
    p = check_proportions(proportions, len(thresholds) + 1)
    flat = score.ravel()
    n = flat.size
    order = np.sort(flat)
    counts = np.floor(np.cumsum(p) * n + 0.5).astype(np.int64)[:-1]
    cuts = []
    for c in counts:
        if c <= 0:
            cuts.append(-np.inf)
        elif c >= n:
            cuts.append(np.inf)
        else:
            cuts.append(0.5 * (order[c - 1] + order[c]))
    out = np.zeros_like(flat, dtype=np.float64)
    bounds = [-np.inf] + cuts + [np.inf]
    for j, (lo, hi) in enumerate(_class_intervals(thresholds)):
        sel = (flat >= bounds[j]) & (flat < bounds[j + 1])
        if not sel.any():
            continue
        s = flat[sel]
        smin, smax = s.min(), s.max()
        frac = (s - smin) / (smax - smin) if smax > smin else np.zeros_like(s)
        out[sel] = lo + (hi - lo) * frac
    return out.reshape(score.shape)


def synthesize(n_samples: int = 64, n_channels: int = 16, height: int = 64, width: int = 64,
               proportions: Sequence[float] = (0.90, 0.0925, 0.0075), seed: int = 0,
               thresholds: Sequence[float] = DEFAULT_THRESHOLDS, n_latent: int = 4,
               exponent: float = SPECTRAL_EXPONENT) -> GridDataset:
    """Generate a deterministic synthetic dataset of correlated smooth fields.

    Each channel mixes ``n_latent`` shared random fields with a channel-specific
    field, then gets a physical-looking offset and scale. QPE is the positive
    part of a humidity/temperature combination rescaled so that the pooled
    class fractions match ``proportions``.
    """
    if n_channels < 2:
        raise ConfigError("need at least 2 channels (humidity-like and temperature-like)")
    if min(n_samples, height, width) < 0 or min(height, width) < 1:
        raise ConfigError("invalid dimensions")
    check_proportions(proportions, len(thresholds) + 1)
    names = default_variable_names(n_channels)
    rng = np.random.default_rng(seed)
    mixing = rng.normal(size=(n_channels, n_latent))
    own_weight = rng.uniform(0.2, 0.5, size=n_channels)
    offsets = rng.uniform(-5.0, 300.0, size=n_channels)
    scales = rng.uniform(0.5, 10.0, size=n_channels)

    lat = spectral_fields(rng, n_samples * n_latent, height, width, exponent)
    lat = lat.reshape(n_samples, n_latent, height, width)
    own = spectral_fields(rng, n_samples * n_channels, height, width, exponent)
    own = own.reshape(n_samples, n_channels, height, width)
    std_fields = np.einsum("cl,nlhw->nchw", mixing, lat) + own_weight[None, :, None, None] * own
    std_fields /= np.sqrt((mixing ** 2).sum(axis=1) + own_weight ** 2)[None, :, None, None]

    hum = names.index("q850") if "q850" in names else 1
    tmp = names.index("t850") if "t850" in names else 0
    score = np.maximum(std_fields[:, hum] + 0.5 * std_fields[:, tmp] - 0.25, 0.0) ** 1.5
    qpe = rescale_to_proportions(score, proportions, thresholds) if n_samples else score
    variables = offsets[None, :, None, None] + scales[None, :, None, None] * std_fields
    stamps = [f"synthetic-{seed}-{i:06d}" for i in range(n_samples)]
    return GridDataset(variables, np.clip(qpe, 0.0, np.nextafter(QPE_MAX, 0)), names, stamps,
                       provenance=f"synthetic:seed={seed}")


# -- file I/O ----------------------------------------------------------
def store_grid(dataset: GridDataset, path) -> None:
    n = len(dataset)
    c, h, w = dataset.dims
    parts = [GRID_MAGIC, struct.pack("<5I", GRID_VERSION, n, c, h, w)]
    parts += [pack_string16(name) for name in dataset.names]
    for i in range(n):
        parts.append(pack_string16(dataset.timestamps[i]))
        parts.append(dataset.variables[i].astype("<f4").tobytes())
        parts.append(dataset.qpe[i].astype("<f4").tobytes())
    atomic_write(path, b"".join(parts))


def load_grid(path) -> GridDataset:
    r = Reader(Path(path).read_bytes(), what=str(path))
    r.magic(GRID_MAGIC)
    version = r.u32()
    if version != GRID_VERSION:
        raise VersionMismatchError(f"{path}: grid format version {version}, expected {GRID_VERSION}")
    n, c, h, w = (r.u32() for _ in range(4))
    per_sample = check_elements(str(path), c, h, w)
    check_elements(str(path), n, per_sample + h * w)
    names = [r.string16() for _ in range(c)]
    variables = np.empty((n, c, h, w), dtype=np.float32)
    qpe = np.empty((n, h, w), dtype=np.float32)
    stamps = []
    for i in range(n):
        stamps.append(r.string16())
        variables[i] = r.array("<f4", per_sample).reshape(c, h, w)
        qpe[i] = r.array("<f4", h * w).reshape(h, w)
    r.finish()
    return GridDataset(variables, qpe, names, stamps, provenance=f"file:{path}")


def split(dataset: GridDataset, ratios: Sequence[float] = (0.8, 0.1, 0.1),
          seed: int = 0) -> tuple[GridDataset, GridDataset, GridDataset]:
    """Seeded disjoint train/val/test partition.

    Validation and test sizes are floored; the remainder goes to train.
    """
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or abs(r.sum() - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {ratios}")
    n = len(dataset)
    n_val = int(np.floor(r[1] * n + 1e-9))
    n_test = int(np.floor(r[2] * n + 1e-9))
    perm = np.random.default_rng(seed).permutation(n)
    n_train = n - n_val - n_test
    return (dataset.subset(np.sort(perm[:n_train])),
            dataset.subset(np.sort(perm[n_train:n_train + n_val])),
            dataset.subset(np.sort(perm[n_train + n_val:])))
