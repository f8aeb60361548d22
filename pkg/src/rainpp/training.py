"""Losses, the two training phases and checkpoint I/O.

Phase 1 trains the encoder and the reconstruction head to fill in masked
tokens. Phase 2 freezes the encoder and trains only the segmentation head
on (optionally continuous) rainfall-class targets.

Checkpoint layout (``.nwpp``, little-endian)::

    "NWPP" u32 version u32 json_len json
    u32 tensor_count
    per tensor: u16 name_len name u8 dtype u8 frozen u8 rank u64 dims[rank] payload
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from ._binary import Reader, atomic_write, check_elements, pack_string16
from .autodiff import OptimState, Tensor, adamw_step, as_tensor, cross_entropy, grad
from .errors import ConfigError, FormatError, VersionMismatchError
from .grid import GridDataset
from .labeling import ThresholdSet, class_weights, hard_field, smooth_field
from .model import (ModelConfig, ParameterStore, forward_reconstruction, forward_segmentation,
                    freeze_encoder, init_params, mask_from_indices, sample_mask)

log = logging.getLogger(__name__)

CKPT_MAGIC = b"NWPP"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


# -- losses ------------------------------------------------------------
def reconstruction_loss(x, x_hat, mask=None) -> Tensor:
    """Half the mean squared error over the pixels selected by ``mask``.

    ``mask=None`` averages over every pixel.
    """
    x_hat = as_tensor(x_hat)
    x = np.asarray(getattr(x, "data", x), dtype=x_hat.dtype)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    diff = x_hat - x
    if mask is None:
        return (diff * diff).mean() * 0.5
    m = np.asarray(mask, dtype=bool)
    if m.shape != x.shape:
        raise ValueError(f"mask shape {m.shape} does not match {x.shape}")
    count = int(m.sum())
    if count == 0:
        raise ValueError("reconstruction loss needs a non-empty mask")
    return (diff * diff * m.astype(x_hat.dtype)).sum() * (0.5 / count)


def segmentation_loss(logits, targets, weights=None) -> Tensor:
    """Pixel mean of ``-sum_j w_j p*_j log softmax(logits)_j``.

    ``logits`` and ``targets`` are [m,H,W] or [N,m,H,W].
    """
    logits = as_tensor(logits)
    p = np.asarray(targets, dtype=np.float64)
    if p.shape != logits.shape:
        raise ValueError(f"target shape {p.shape} does not match logits {logits.shape}")
    axis = logits.ndim - 3
    if np.any(np.abs(p.sum(axis=axis) - 1.0) > 1e-4):
        raise ValueError("target class probabilities must sum to 1 per pixel")
    return cross_entropy(logits, p, weights, axis=axis)


# -- configuration -----------------------------------------------------
@dataclass(frozen=True)
class PhaseConfig:
    phase: str = "pretrain"
    lr: float = 1.6e-3
    iterations: int = 300
    batch_size: int = 4
    mask_ratio: float = 0.9
    seed: int = 0
    lambda_rec: float = 1.0
    lambda_kl: float = 1.0
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    cosine: bool = True
    warmup: float = 0.0  # fraction of iterations with linear warmup
    masked_only: bool = True
    label_mode: str = "continuous"
    class_weighting: str = "inverse-frequency"
    thresholds: tuple[float, ...] = (0.1, 10.0)

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        object.__setattr__(self, "thresholds", tuple(float(t) for t in self.thresholds))

    def validate(self) -> None:
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError(f"mask ratio {self.mask_ratio} outside [0, 1]")
        if self.label_mode not in ("continuous", "onehot"):
            raise ConfigError(f"unknown label mode {self.label_mode!r}")
        if self.class_weighting not in ("uniform", "inverse-frequency"):
            raise ConfigError(f"unknown class weighting {self.class_weighting!r}")
        ThresholdSet(self.thresholds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["thresholds"] = list(self.thresholds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhaseConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown phase config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "full-pretrain": PhaseConfig("pretrain", lr=1.6e-3, iterations=150_000, mask_ratio=0.9,
                                  warmup=0.05),
    "full-finetune": PhaseConfig("finetune", lr=1e-4, iterations=35_000, mask_ratio=0.25,
                                  warmup=0.05),
    "tiny-pretrain": PhaseConfig("pretrain", lr=1.6e-3, iterations=300, mask_ratio=0.9,
                                 warmup=0.1),
    "tiny-finetune": PhaseConfig("finetune", lr=3e-3, iterations=500, mask_ratio=0.25,
                                 warmup=0.1),
}


@dataclass
class Checkpoint:
    store: ParameterStore
    model: ModelConfig
    phase: PhaseConfig
    optim: OptimState | None = None
    history: dict[str, list[float]] = field(default_factory=dict)
    norm_stats: dict | None = None
    extra: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        return {
            "format_version": CKPT_VERSION,
            "package_version": __version__,
            "model": self.model.to_dict(),
            "phase": self.phase.to_dict(),
            "optim": None if self.optim is None else self.optim.hyperparameters(),
            "history": self.history,
            "norm_stats": self.norm_stats,
            "frozen": sorted(self.store.frozen),
            "extra": self.extra,
        }


# -- training loops ----------------------------------------------------
def _check_dataset(dataset: GridDataset, cfg: ModelConfig) -> None:
    if len(dataset) == 0:
        raise ConfigError("training needs a non-empty dataset")
    c, h, w = dataset.dims
    if c != cfg.in_channels:
        raise ConfigError(f"dataset has {c} channels, model expects {cfg.in_channels}")
    cfg.validate(h, w)


def _batch_masks(rng, n_tokens: int, batch: int, ratio: float) -> np.ndarray:
    return np.stack([mask_from_indices(sample_mask(n_tokens, ratio, rng), n_tokens)
                     for _ in range(batch)])


def _optimizer(phase: PhaseConfig) -> OptimState:
    return OptimState(lr=phase.lr, betas=phase.betas, weight_decay=phase.weight_decay,
                      total_steps=phase.iterations if phase.cosine else None,
                      warmup_steps=int(phase.warmup * phase.iterations))


def _train_loop(store, names, phase, rng, step_loss: Callable, n_samples: int,
                history: dict, optim: OptimState) -> None:
    params = [store[n] for n in names]
    arrays = {n: store[n].data for n in names}
    batch = min(phase.batch_size, n_samples)
    for it in range(phase.iterations):
        idx = np.sort(rng.choice(n_samples, size=batch, replace=False))
        loss = step_loss(idx)
        grads = grad(loss, params)
        adamw_step(arrays, dict(zip(names, grads)), optim)
        history["loss"].append(float(loss.data))
        if it % 50 == 0:
            log.debug("%s iter %d loss %.5f", phase.phase, it, history["loss"][-1])


def pretrain(phase: PhaseConfig, dataset: GridDataset, model: ModelConfig | None = None,
             store: ParameterStore | None = None) -> Checkpoint:
    """Masked-reconstruction pre-training on a normalized dataset."""
    model = model or ModelConfig(in_channels=dataset.dims[0])
    phase = replace(phase, phase="pretrain")
    phase.validate()
    _check_dataset(dataset, model)
    n_tokens = model.patch.n_tokens(*dataset.dims)
    if phase.masked_only and np.floor(phase.mask_ratio * n_tokens + 0.5) < 1:
        raise ConfigError("masked-pixel loss needs a mask ratio that masks at least one token")
    rng = np.random.default_rng(phase.seed)
    store = store or init_params(model, phase.seed)
    names = [n for n in store.trainable() if not n.startswith("seg.")]
    x_all = dataset.variables.astype(store["embed.proj.w"].dtype)
    history: dict[str, list[float]] = {"loss": []}

    def step_loss(idx):
        x = x_all[idx]
        masks = _batch_masks(rng, n_tokens, len(idx), phase.mask_ratio)
        x_hat, pm = forward_reconstruction(x, store, model, masks)
        return reconstruction_loss(x, x_hat, pm if phase.masked_only else None) * phase.lambda_rec

    optim = _optimizer(phase)
    _train_loop(store, names, phase, rng, step_loss, len(dataset), history, optim)
    return Checkpoint(store, model, phase, optim, history)


def build_targets(qpe: np.ndarray, phase: PhaseConfig) -> np.ndarray:
    gamma = ThresholdSet(phase.thresholds)
    if phase.label_mode == "continuous":
        return smooth_field(qpe, gamma)
    return hard_field(qpe, gamma)


def finetune(phase: PhaseConfig, dataset: GridDataset, pretrained: Checkpoint | None = None,
             model: ModelConfig | None = None) -> Checkpoint:
    """Train the segmentation head on top of a frozen encoder.

    ``pretrained=None`` starts from a randomly initialized encoder (ablation).
    """
    phase = replace(phase, phase="finetune")
    phase.validate()
    if pretrained is not None:
        model = pretrained.model
        store = pretrained.store.copy()
    else:
        model = model or ModelConfig(in_channels=dataset.dims[0])
        store = init_params(model, phase.seed)
    gamma = ThresholdSet(phase.thresholds)
    if gamma.n_classes != model.n_classes:
        raise ConfigError(f"{gamma.n_classes} classes from thresholds, model has {model.n_classes}")
    _check_dataset(dataset, model)
    freeze_encoder(store)
    n_tokens = model.patch.n_tokens(*dataset.dims)
    rng = np.random.default_rng(phase.seed)
    names = store.trainable("seg.")
    dtype = store["embed.proj.w"].dtype
    x_all = dataset.variables.astype(dtype)
    targets = build_targets(dataset.qpe, phase).astype(dtype)
    # class frequencies are the label mass the targets actually carry
    weights = class_weights(targets.sum(axis=(0, 2, 3), dtype=np.float64), phase.class_weighting)
    history: dict[str, list[float]] = {"loss": []}

    def step_loss(idx):
        masks = None
        if phase.mask_ratio > 0:
            masks = _batch_masks(rng, n_tokens, len(idx), phase.mask_ratio)
        logits = forward_segmentation(x_all[idx], store, model, masks)
        return segmentation_loss(logits, targets[idx], weights) * phase.lambda_kl

    optim = _optimizer(phase)
    _train_loop(store, names, phase, rng, step_loss, len(dataset), history, optim)
    extra = {"class_weights": [float(w) for w in weights], "pretrained": pretrained is not None}
    norm = pretrained.norm_stats if pretrained is not None else None
    return Checkpoint(store, model, phase, optim, history, norm, extra)


def predict_proba(store: ParameterStore, model: ModelConfig, variables: np.ndarray,
                  batch_size: int = 8) -> np.ndarray:
    """Class probabilities [N, m, H, W] with masking disabled."""
    from .autodiff import no_grad, softmax

    dtype = store["embed.proj.w"].dtype
    out = []
    with no_grad():
        for start in range(0, len(variables), batch_size):
            x = np.asarray(variables[start:start + batch_size], dtype=dtype)
            out.append(softmax(forward_segmentation(x, store, model), axis=1).data)
    if not out:
        return np.zeros((0, model.n_classes) + tuple(np.shape(variables)[2:]), dtype=dtype)
    return np.concatenate(out, axis=0)


def predict_classes(store, model, variables, batch_size: int = 8) -> np.ndarray:
    return np.argmax(predict_proba(store, model, variables, batch_size), axis=1)


# -- checkpoint I/O ----------------------------------------------------
def _tensor_record(name: str, arr: np.ndarray, frozen: bool) -> bytes:
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype} for {name}")
    if arr.ndim > 255:
        raise ValueError("rank too large")
    head = pack_string16(name) + struct.pack("<BBB", code, int(frozen), arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.astype(_DTYPES[code]).tobytes()


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata(), sort_keys=True).encode()
    records = [_tensor_record(n, t.data, n in ckpt.store.frozen) for n, t in ckpt.store.items()]
    if ckpt.optim is not None:
        for n in sorted(ckpt.optim.m):
            records.append(_tensor_record(f"optim.m/{n}", ckpt.optim.m[n], False))
            records.append(_tensor_record(f"optim.v/{n}", ckpt.optim.v[n], False))
    return b"".join([CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta,
                     struct.pack("<I", len(records))] + records)


def store_checkpoint(ckpt: Checkpoint, path) -> None:
    atomic_write(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    r = Reader(Path(path).read_bytes(), what=str(path))
    r.magic(CKPT_MAGIC)
    version = r.u32()
    if version != CKPT_VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    meta_len = r.u32()
    raw = r.take(meta_len)
    try:
        meta = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint metadata") from exc
    count = r.u32()
    store = ParameterStore()
    moments: dict[str, dict[str, np.ndarray]] = {"m": {}, "v": {}}
    for _ in range(count):
        name = r.string16()
        code, frozen, rank = r.u8(), r.u8(), r.u8()
        if code not in _DTYPES:
            raise FormatError(f"{path}: unknown dtype code {code} for {name}")
        dims = tuple(r.u64() for _ in range(rank))
        n = check_elements(str(path), *dims)
        arr = r.array(_DTYPES[code].str, n).reshape(dims)
        arr = arr.astype(_DTYPES[code].newbyteorder("="))
        if name.startswith("optim."):
            kind, pname = name[len("optim."):].split("/", 1)
            moments[kind][pname] = arr
        else:
            store.add(name, arr, frozen=bool(frozen))
    r.finish()
    try:
        model = ModelConfig.from_dict(meta["model"])
        phase = PhaseConfig.from_dict(meta["phase"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: checkpoint metadata is incomplete") from exc
    optim = None
    if meta.get("optim") is not None:
        o = meta["optim"]
        optim = OptimState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"],
                           weight_decay=o["weight_decay"], total_steps=o["total_steps"],
                           warmup_steps=o.get("warmup_steps", 0), step=o["step"], m=moments["m"], v=moments["v"])
    return Checkpoint(store, model, phase, optim, meta.get("history", {}),
                      meta.get("norm_stats"), meta.get("extra", {}))


def checkpoints_equal(a: Checkpoint, b: Checkpoint) -> bool:
    if a.metadata() != b.metadata() or list(a.store) != list(b.store):
        return False
    for n in a.store:
        if a.store[n].dtype != b.store[n].dtype or not np.array_equal(a.store[n].data, b.store[n].data):
            return False
    ma = a.optim.m if a.optim else {}
    mb = b.optim.m if b.optim else {}
    if set(ma) != set(mb):
        return False
    return all(np.array_equal(ma[n], mb[n]) and np.array_equal(a.optim.v[n], b.optim.v[n]) for n in ma)
