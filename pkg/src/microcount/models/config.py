"""Backbone configuration, named presets and their reported reference figures."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

FAMILIES = ("cnn", "resnet", "vit", "deepvit", "xcit", "crossvit", "parallelvit",
            "transcrowd-g", "transcrowd-t")
TOKEN_FAMILIES = ("vit", "deepvit", "xcit", "parallelvit", "transcrowd-g", "transcrowd-t")
ATTENTION_FAMILIES = TOKEN_FAMILIES + ("crossvit",)
HEAD_TYPES = ("fc", "gap", "token")


class ConfigError(ValueError):
    pass


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else v


@dataclass(frozen=True)
class BackboneConfig:
    family: str
    depth: int
    heads: int = 0
    dim: int | tuple = 0
    mlp_dim: int | tuple = 0
    patch_size: int | tuple = 16
    input_size: int = 384
    head_type: str = "fc"
    dim_head: int | None = None      # per-head width; defaults to dim // heads
    cls_token: bool = True           # transformer families only
    head_hidden: int = 0             # hidden width of the gap head (0: single linear)
    channels: tuple = ()             # cnn stage widths
    blocks: tuple = ()               # resnet bottlenecks per stage
    base_width: int = 64             # resnet stem width
    small_depth: int = 1             # crossvit: small-patch branch layers (depth is the large branch)
    cross_depth: int = 1             # crossvit: fusion layers per multi-scale block
    scales: int = 1                  # crossvit: multi-scale blocks
    cls_depth: int = 1               # xcit: class-attention layers
    name: str = ""

    def __post_init__(self):
        for f in ("dim", "mlp_dim", "patch_size", "channels", "blocks"):
            object.__setattr__(self, f, _tuple(getattr(self, f)))
        self.validate()

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.head_type not in HEAD_TYPES:
            raise ConfigError(f"unknown head_type {self.head_type!r}")
        if self.depth < 1:
            raise ConfigError("depth must be positive")
        if self.input_size < 1:
            raise ConfigError("input_size must be positive")
        if self.head_type != "fc" and self.family not in TOKEN_FAMILIES:
            raise ConfigError(f"{self.head_type} head needs a token-sequence family, not {self.family}")
        if self.family == "cnn":
            if len(self.channels) != self.depth:
                raise ConfigError("cnn needs one channel width per stage")
            if self.input_size % 2 ** self.depth:
                raise ConfigError(f"input_size must be divisible by {2 ** self.depth}")
            return
        if self.family == "resnet":
            if not self.blocks or sum(self.blocks) != self.depth:
                raise ConfigError("resnet depth must equal the total number of bottleneck blocks")
            return
        pairs = ("dim", "mlp_dim", "patch_size")
        if self.family == "crossvit":
            for f in pairs:
                v = getattr(self, f)
                if not (isinstance(v, tuple) and len(v) == 2):
                    raise ConfigError(f"crossvit needs a pair for {f}")
            dims, patches = self.dim, self.patch_size
        else:
            for f in pairs:
                if isinstance(getattr(self, f), tuple):
                    raise ConfigError(f"{self.family} needs a single integer for {f}")
            dims, patches = (self.dim,), (self.patch_size,)
        if self.heads < 1:
            raise ConfigError("attention families need heads >= 1")
        for d in dims:
            if d < 1 or (self.dim_head is None and d % self.heads):
                raise ConfigError(f"dim {d} not divisible by heads {self.heads}")
        for p in patches:
            if p < 1 or self.input_size % p:
                raise ConfigError(f"input_size {self.input_size} not divisible by patch_size {p}")
        if self.head_type == "fc" and self.family in TOKEN_FAMILIES and not self.cls_token:
            raise ConfigError("fc head on a token family needs a class token")

    def replace(self, **changes) -> "BackboneConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _vit_base(**kw):
    base = dict(family="vit", depth=12, heads=12, dim=768, mlp_dim=3072, patch_size=16)
    base.update(kw)
    return BackboneConfig(**base)


PRESETS = {
    "cnn-base": BackboneConfig("cnn", 1, channels=(16,), mlp_dim=16, name="cnn-base"),
    "cnn-medium": BackboneConfig("cnn", 2, channels=(32, 64), mlp_dim=64, name="cnn-medium"),
    "cnn-deep": BackboneConfig("cnn", 3, channels=(64, 128, 256), mlp_dim=256, name="cnn-deep"),
    "resnet50": BackboneConfig("resnet", 16, blocks=(3, 4, 6, 3), mlp_dim=2048, name="resnet50"),
    "resnet101": BackboneConfig("resnet", 33, blocks=(3, 4, 23, 3), mlp_dim=2048, name="resnet101"),
    "vit-vanilla": _vit_base(patch_size=32, name="vit-vanilla"),
    "xcit-s24": BackboneConfig("xcit", 24, heads=8, dim=384, mlp_dim=1536, patch_size=16,
                               dim_head=64, cls_depth=1, name="xcit-s24"),
    "crossvit-ti": BackboneConfig("crossvit", 4, heads=3, dim=(96, 192), mlp_dim=(384, 768),
                                  patch_size=(16, 32), dim_head=64, small_depth=2, name="crossvit-ti"),
    "parallelvit-ti": BackboneConfig("parallelvit", 12, heads=3, dim=192, mlp_dim=192, patch_size=16,
                                     dim_head=64, name="parallelvit-ti"),
    "deepvit-s": BackboneConfig("deepvit", 16, heads=12, dim=396, mlp_dim=1188, patch_size=16,
                                dim_head=64, name="deepvit-s"),
    "transcrowd-g": _vit_base(family="transcrowd-g", head_type="gap", head_hidden=4608,
                              name="transcrowd-g"),
    "transcrowd-t": _vit_base(family="transcrowd-t", head_type="token", cls_token=False,
                              name="transcrowd-t"),
}

# display name, results-table group, reported parameters (1e6), reported FLOPs (1e8)
REPORTED = {
    "cnn-base": ("CNN Base", "traditional", 0.59, 0.53),
    "cnn-medium": ("CNN Medium", "traditional", 0.61, 7.86),
    "cnn-deep": ("CNN Deep", "traditional", 0.96, 56.48),
    "resnet50": ("ResNet50", "traditional", 23.53, 120.19),
    "resnet101": ("ResNet101", "traditional", 42.54, 229.58),
    "transcrowd-g": ("TransCrowd-G", "state-of-the-art", 90.39, 554.86),
    "transcrowd-t": ("TransCrowd-T", "state-of-the-art", 86.86, 554.64),
    "crossvit-ti": ("CrossViT", "vit", 3.07, 50.91),
    "deepvit-s": ("DeepViT", "vit", 34.91, 293.68),
    "xcit-s24": ("XCiT", "vit", 49.82, 265.03),
    "parallelvit-ti": ("Parallel ViT", "vit", 5.50, 62.42),
    "vit-vanilla": ("Vanilla ViT", "vit", 87.50, 128.39),
}


def get_preset(name: str) -> BackboneConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}") from None


def toy_config(family: str, input_size: int = 32, depth: int = 2, dim: int = 32, heads: int = 4,
               head_type: str | None = None, **overrides) -> BackboneConfig:
    """A small configuration of ``family`` for tests and quick runs."""
    if family == "cnn":
        kw = dict(depth=depth, channels=tuple(dim // 2 ** (depth - 1 - i) for i in range(depth)), mlp_dim=dim)
    elif family == "resnet":
        kw = dict(depth=depth, blocks=(1,) * depth, base_width=max(dim // 8, 2))
    elif family == "crossvit":
        kw = dict(depth=depth, heads=heads // 2 or 1, dim=(dim // 2, dim), mlp_dim=(dim, 2 * dim),
                  patch_size=(input_size // 8, input_size // 4), small_depth=1)
    else:
        kw = dict(depth=depth, heads=heads, dim=dim, mlp_dim=2 * dim, patch_size=input_size // 4)
        if family == "transcrowd-t":
            kw.update(head_type="token", cls_token=False)
        elif family == "transcrowd-g":
            kw.update(head_type="gap", head_hidden=dim)
    if head_type is not None:
        kw["head_type"] = head_type
        if head_type == "token":
            kw["cls_token"] = False
    kw.update(overrides)
    return BackboneConfig(family=family, input_size=input_size, name=f"toy-{family}", **kw)
