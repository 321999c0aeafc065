"""Model assembly and accounting."""

from __future__ import annotations

import numpy as np

from .cnn import PlainCNN, ResNet
from .config import BackboneConfig, ConfigError, get_preset
from .heads import CountingModel, FCHead, GAPHead, TokenHead
from .vit import CrossViTBackbone, ViTBackbone, XCiTBackbone

_BLOCK_KIND = {"vit": "standard", "transcrowd-g": "standard", "transcrowd-t": "standard",
               "deepvit": "reattention", "parallelvit": "parallel"}


def _backbone(cfg: BackboneConfig, rng):
    f = cfg.family
    if f == "cnn":
        return PlainCNN(cfg.input_size, cfg.channels, rng)
    if f == "resnet":
        return ResNet(cfg.blocks, rng, cfg.base_width)
    if f == "crossvit":
        return CrossViTBackbone(cfg.input_size, cfg.patch_size, cfg.dim, cfg.mlp_dim, cfg.heads, rng,
                                cfg.dim_head, depths=(cfg.small_depth, cfg.depth),
                                cross_depth=cfg.cross_depth, scales=cfg.scales)
    if f == "xcit":
        return XCiTBackbone(cfg.input_size, cfg.patch_size, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_dim, rng,
                            cfg.dim_head, cls_token=cfg.cls_token, cls_depth=cfg.cls_depth)
    if f in _BLOCK_KIND:
        return ViTBackbone(cfg.input_size, cfg.patch_size, cfg.dim, cfg.depth, cfg.heads, cfg.mlp_dim, rng,
                           cfg.dim_head, cls_token=cfg.cls_token, block=_BLOCK_KIND[f])
    raise ConfigError(f"unknown family {f!r}")


def build_backbone(config: BackboneConfig | str, seed: int = 0) -> CountingModel:
    """Build the backbone plus regression head described by ``config``
    (a BackboneConfig or a preset name)."""
    cfg = get_preset(config) if isinstance(config, str) else config
    cfg.validate()
    rng = np.random.default_rng(seed)
    backbone = _backbone(cfg, rng)
    if cfg.head_type == "token":
        head = TokenHead(cfg.dim, rng)
    elif cfg.head_type == "gap":
        head = GAPHead(cfg.dim, rng, cfg.head_hidden)
    else:
        feat = backbone.feature_dim if backbone.output == "features" else cfg.dim
        head = FCHead(feat, rng)
    return CountingModel(cfg, backbone, head)


def count_parameters(model) -> int:
    return int(sum(p.size for p in model.parameters()))


def estimate_flops(config: BackboneConfig | str, input_size: int | None = None,
                   flops_per_mac: float = 1.0, batch: int = 1) -> float:
    """Analytic operation count of one forward pass on a (batch, 3, S, S) input.

    Weights are not materialised: the model is built at a fake seed only for
    its structure, so this stays cheap for the large presets too.
    """
    cfg = get_preset(config) if isinstance(config, str) else config
    if input_size is not None and input_size != cfg.input_size:
        cfg = cfg.replace(input_size=input_size)
    model = _StructureOnly.build(cfg)
    return float(model.flops((batch, 3, cfg.input_size, cfg.input_size), flops_per_mac)[0])


def estimate_parameters(config: BackboneConfig | str) -> int:
    """Learnable-parameter count without drawing any weights."""
    cfg = get_preset(config) if isinstance(config, str) else config
    return count_parameters(_StructureOnly.build(cfg))


class _StructureOnly:
    """Builds a model with a generator whose draws are free (zeros)."""

    class _ZeroRng:
        def standard_normal(self, size=None, dtype=np.float64):
            return np.zeros(size, dtype=dtype)

    @classmethod
    def build(cls, cfg):
        backbone = _backbone(cfg, cls._ZeroRng())
        rng = cls._ZeroRng()
        if cfg.head_type == "token":
            head = TokenHead(cfg.dim, rng)
        elif cfg.head_type == "gap":
            head = GAPHead(cfg.dim, rng, cfg.head_hidden)
        else:
            head = FCHead(backbone.feature_dim if backbone.output == "features" else cfg.dim, rng)
        return CountingModel(cfg, backbone, head)
