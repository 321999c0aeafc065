"""Backbones, attention variants, regression heads and model accounting."""

from .attention import Attention, CrossAttention, XCAttention, attention_maps, mhsa, re_attention, xca
from .build import build_backbone, count_parameters, estimate_flops, estimate_parameters
from .config import (ATTENTION_FAMILIES, FAMILIES, PRESETS, REPORTED, TOKEN_FAMILIES, BackboneConfig,
                     ConfigError, get_preset, toy_config)
from .heads import CountingModel, FCHead, GAPHead, TokenHead, regression_head
from .layers import BatchNorm2d, Conv2d, FeedForward, LayerNorm, Linear, MaxPool2d
from .module import Module
from .vit import (CrossFusion, ParallelBlock, PatchEmbed, ViTBackbone, XCiTBackbone,
                  cross_attention_fuse, parallel_pair_block)
