from __future__ import annotations

from dataclasses import asdict, dataclass, field

from ..errors import ConfigError


@dataclass(frozen=True)
class PatchSpec:
    """Token geometry: ``t`` channels by ``p`` x ``p`` pixels, embedded to ``embed_dim``."""

    t: int = 4
    p: int = 4
    embed_dim: int = 48

    def validate(self, channels: int | None = None, height: int | None = None,
                 width: int | None = None) -> None:
        if min(self.t, self.p, self.embed_dim) < 1:
            raise ConfigError("patch sizes and embed_dim must be positive")
        if self.embed_dim % 6:
            raise ConfigError(f"embed_dim {self.embed_dim} must be divisible by 6")
        if channels is not None and channels % self.t:
            raise ConfigError(f"t={self.t} does not divide C={channels}")
        for name, size in (("H", height), ("W", width)):
            if size is not None and size % self.p:
                raise ConfigError(f"p={self.p} does not divide {name}={size}")

    def lattice(self, channels: int, height: int, width: int) -> tuple[int, int, int]:
        self.validate(channels, height, width)
        return channels // self.t, height // self.p, width // self.p

    def n_tokens(self, channels: int, height: int, width: int) -> int:
        a, b, c = self.lattice(channels, height, width)
        return a * b * c


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 16
    patch: PatchSpec = field(default_factory=PatchSpec)
    stages: tuple[tuple[int, int], ...] = ((2, 32), (2, 64), (2, 96), (2, 128))
    points: int = 9
    groups: int = 4
    mlp_ratio: int = 2
    decoder_channels: int = 64
    recon_channels: int = 32
    n_classes: int = 3
    pool_bins: tuple[int, ...] = (1, 2, 3, 6)
    mask_ratio_pretrain: float = 0.9
    mask_ratio_finetune: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages))
        object.__setattr__(self, "pool_bins", tuple(int(b) for b in self.pool_bins))
        if isinstance(self.patch, dict):
            object.__setattr__(self, "patch", PatchSpec(**self.patch))

    def validate(self, height: int | None = None, width: int | None = None) -> None:
        self.patch.validate(self.in_channels, height, width)
        if not self.stages:
            raise ConfigError("model needs at least one stage")
        if self.points < 1:
            raise ConfigError("DSK point count K must be >= 1")
        for name in ("in_channels", "groups", "mlp_ratio", "decoder_channels", "recon_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.pool_bins or min(self.pool_bins) < 1:
            raise ConfigError(f"pool bins must be positive, got {self.pool_bins}")
        for blocks, ch in self.stages:
            if blocks < 0 or ch < 1:
                raise ConfigError(f"invalid stage {(blocks, ch)}")
            if ch % self.groups:
                raise ConfigError(f"groups={self.groups} does not divide stage channels {ch}")
        if self.n_classes < 2:
            raise ConfigError("need at least 2 classes")
        for r in (self.mask_ratio_pretrain, self.mask_ratio_finetune):
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"mask ratio {r} outside [0, 1]")
        factor = 2 ** len(self.stages)
        for name, size in (("H", height), ("W", width)):
            if size is not None and size % factor:
                raise ConfigError(f"{name}={size} must be divisible by {factor} for {len(self.stages)} stages")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["pool_bins"] = list(self.pool_bins)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "patch" in d and isinstance(d["patch"], dict):
            d["patch"] = PatchSpec(**d["patch"])
        if "stages" in d:
            d["stages"] = tuple(tuple(s) for s in d["stages"])
        if "pool_bins" in d:
            d["pool_bins"] = tuple(d["pool_bins"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


TINY_MODEL = ModelConfig(
    patch=PatchSpec(t=4, p=2, embed_dim=48),
    stages=((1, 16), (1, 24), (1, 32), (1, 48)),
    decoder_channels=24,
    recon_channels=24,
)
