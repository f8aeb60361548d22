from __future__ import annotations

from typing import Iterator

import numpy as np

from ..autodiff import Tensor
from .config import ModelConfig

ENCODER_PREFIXES = ("embed.", "enc.")


class ParameterStore:
    """Named parameter tensors with per-tensor frozen flags."""

    def __init__(self, tensors: dict[str, np.ndarray] | None = None,
                 frozen: set[str] | None = None):
        self._tensors: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        for name, arr in (tensors or {}).items():
            self.add(name, arr)
        for name in frozen or ():
            self.set_frozen(name)

    def add(self, name: str, value: np.ndarray, frozen: bool = False) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, copy=True), requires_grad=not frozen, name=name)
        self._tensors[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def set_frozen(self, name: str, frozen: bool = True) -> None:
        t = self._tensors[name]
        t.requires_grad = not frozen
        if frozen:
            self.frozen.add(name)
        else:
            self.frozen.discard(name)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._tensors if n.startswith(prefix)]

    def trainable(self, prefix: str = "") -> list[str]:
        return [n for n in self.names(prefix) if n not in self.frozen]

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self._tensors.items()}

    def copy(self) -> "ParameterStore":
        return ParameterStore({n: t.data for n, t in self._tensors.items()}, set(self.frozen))

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({n: t.data.astype(dtype) for n, t in self._tensors.items()},
                              set(self.frozen))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None


def freeze_encoder(store: ParameterStore) -> ParameterStore:
    """Freeze patch projection, mask token and every encoder-stage tensor (idempotent)."""
    for name in store:
        if name.startswith(ENCODER_PREFIXES):
            store.set_frozen(name)
    return store


class _Init:
    def __init__(self, rng: np.random.Generator, dtype):
        self.rng = rng
        self.dtype = dtype

    def normal(self, shape, std: float) -> np.ndarray:
        return (self.rng.standard_normal(shape) * std).astype(self.dtype)

    def conv(self, out_ch: int, in_ch: int, k: int, gain: float = 2.0) -> np.ndarray:
        return self.normal((out_ch, in_ch, k, k), np.sqrt(gain / (in_ch * k * k)))

    def zeros(self, *shape) -> np.ndarray:
        return np.zeros(shape, dtype=self.dtype)

    def ones(self, *shape) -> np.ndarray:
        return np.ones(shape, dtype=self.dtype)


def _add_conv(store, init, name, out_ch, in_ch, k, gain=2.0):
    store.add(f"{name}.w", init.conv(out_ch, in_ch, k, gain))
    store.add(f"{name}.b", init.zeros(out_ch))


def _add_norm(store, init, name, ch):
    store.add(f"{name}.g", init.ones(ch))
    store.add(f"{name}.b", init.zeros(ch))


def init_encoder(store: ParameterStore, cfg: ModelConfig, init: _Init) -> None:
    ps = cfg.patch
    tpp = ps.t * ps.p * ps.p
    store.add("embed.proj.w", init.normal((tpp, ps.embed_dim), np.sqrt(1.0 / tpp)))
    store.add("embed.proj.b", init.zeros(ps.embed_dim))
    store.add("embed.mask_token", init.normal((ps.embed_dim,), 0.02))
    _add_norm(store, init, "embed.mask_norm", ps.embed_dim)
    store.add("embed.restore.w", init.normal((ps.embed_dim, tpp), np.sqrt(1.0 / ps.embed_dim)))
    store.add("embed.restore.b", init.zeros(tpp))

    prev = cfg.in_channels
    for s, (blocks, ch) in enumerate(cfg.stages):
        _add_conv(store, init, f"enc.s{s}.down", ch, prev, 2, gain=1.0)
        _add_norm(store, init, f"enc.s{s}.down_norm", ch)
        for b in range(blocks):
            pre = f"enc.s{s}.b{b}"
            g, k = cfg.groups, cfg.points
            store.add(f"{pre}.offset.w", init.zeros(g * k * 2, ch, 1, 1))
            store.add(f"{pre}.offset.b", init.zeros(g * k * 2))
            store.add(f"{pre}.mod.w", init.zeros(g * k, ch, 1, 1))
            store.add(f"{pre}.mod.b", init.zeros(g * k))
            _add_conv(store, init, f"{pre}.proj", ch, ch, 1, gain=1.0)
            _add_norm(store, init, f"{pre}.norm", ch)
            hidden = ch * cfg.mlp_ratio
            _add_conv(store, init, f"{pre}.mlp1", hidden, ch, 1)
            store.add(f"{pre}.mlp2.w", init.conv(ch, hidden, 1, gain=0.1))
            store.add(f"{pre}.mlp2.b", init.zeros(ch))
        prev = ch


def init_reconstruction_head(store: ParameterStore, cfg: ModelConfig, init: _Init) -> None:
    d = cfg.recon_channels
    for s, (_, ch) in enumerate(cfg.stages):
        _add_conv(store, init, f"rec.lat{s}", d, ch, 1, gain=1.0)
    _add_conv(store, init, "rec.fuse", d, d, 3)
    store.add("rec.out.w", init.conv(cfg.in_channels * 4, d, 1, gain=0.1))
    store.add("rec.out.b", init.zeros(cfg.in_channels * 4))


def init_segmentation_head(store: ParameterStore, cfg: ModelConfig, init: _Init) -> None:
    d = cfg.decoder_channels
    top = cfg.stages[-1][1]
    for b in cfg.pool_bins:
        _add_conv(store, init, f"seg.ppm{b}", d, top, 1)
    _add_conv(store, init, "seg.bottleneck", d, top + d * len(cfg.pool_bins), 3)
    for s, (_, ch) in enumerate(cfg.stages[:-1]):
        _add_conv(store, init, f"seg.lat{s}", d, ch, 1)
        _add_conv(store, init, f"seg.fpn{s}", d, d, 3)
    _add_conv(store, init, "seg.fuse", d, d * len(cfg.stages), 1)
    store.add("seg.cls.w", init.conv(cfg.n_classes, d, 1, gain=0.1))
    store.add("seg.cls.b", init.zeros(cfg.n_classes))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32,
                heads: tuple[str, ...] = ("rec", "seg")) -> ParameterStore:
    """Deterministic initialization of the encoder and the requested heads."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    init = _Init(rng, dtype)
    store = ParameterStore()
    init_encoder(store, cfg, init)
    # heads draw from independent streams so adding one does not shift another
    if "rec" in heads:
        init_reconstruction_head(store, cfg, _Init(np.random.default_rng([seed, 1]), dtype))
    if "seg" in heads:
        init_segmentation_head(store, cfg, _Init(np.random.default_rng([seed, 2]), dtype))
    return store


def reinit_segmentation_head(store: ParameterStore, cfg: ModelConfig, seed: int) -> None:
    dtype = store["embed.proj.w"].dtype
    fresh = ParameterStore()
    init_segmentation_head(fresh, cfg, _Init(np.random.default_rng([seed, 2]), dtype))
    for name, t in fresh.items():
        if name in store:
            store[name].data = t.data.copy()
        else:
            store.add(name, t.data)
