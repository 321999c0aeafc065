"""Transformer encoders: plain, re-attention, parallel, cross-covariance and dual-branch."""

from __future__ import annotations

from ..tensor import ops
from ..tensor import flops as fl
from .attention import Attention, CrossAttention, XCAttention
from .layers import FeedForward, LayerNorm, Linear
from .module import Module, parameter, trunc_normal


def _prepend(token, seq):
    b, _, d = seq.shape
    lead = ops.expand(ops.reshape(token, (1, 1, d)), (b, 1, d))
    return ops.concat([lead, seq], axis=1)


class PatchEmbed(Module):
    """Split a (B, C, S, S) image into non-overlapping patches, project them
    and add learned positional embeddings."""

    def __init__(self, image_size: int, patch_size: int, dim: int, rng, channels: int = 3):
        if image_size % patch_size:
            raise ValueError(f"image size {image_size} not divisible by patch size {patch_size}")
        self.image_size, self.patch_size, self.channels = image_size, patch_size, channels
        self.num_patches = (image_size // patch_size) ** 2
        self.proj = Linear(patch_size * patch_size * channels, dim, rng)
        self.pos = parameter(trunc_normal(rng, (self.num_patches, dim)))

    def forward(self, x):
        b, c, h, w = x.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
        if (h // p) * (w // p) != self.num_patches or c != self.channels:
            raise ValueError(f"expected {self.channels}x{self.image_size}x{self.image_size} input, got {x.shape[1:]}")
        g, gw = h // p, w // p
        t = ops.reshape(x, (b, c, g, p, gw, p))
        t = ops.transpose(t, (0, 2, 4, 3, 5, 1))
        t = ops.reshape(t, (b, g * gw, p * p * c))
        return self.proj(t) + self.pos

    def flops(self, shape, fpm=1.0):
        b = shape[0]
        cost, s = self.proj.flops((b, self.num_patches, self.proj.in_features), fpm)
        return cost + fl.elementwise(*s), s


class Block(Module):
    """x + attn(x), then x + ff(x); both sublayers are pre-norm."""

    def __init__(self, attn, ff):
        self.attn, self.ff = attn, ff

    def forward(self, x):
        x = x + self.attn(x)
        return x + self.ff(x)

    def flops(self, shape, fpm=1.0):
        a, _ = self.attn.flops(shape, fpm)
        f, _ = self.ff.flops(shape, fpm)
        return a + f + 2 * fl.elementwise(*shape), tuple(shape)


class ParallelBlock(Module):
    """Two attention branches summed onto the input, then two FFN branches."""

    def __init__(self, attns, ffs):
        self.attns, self.ffs = list(attns), list(ffs)

    def forward(self, x):
        y = x
        for a in self.attns:
            y = y + a(x)
        z = y
        for f in self.ffs:
            z = z + f(y)
        return z

    def flops(self, shape, fpm=1.0):
        total = sum(m.flops(shape, fpm)[0] for m in self.attns + self.ffs)
        return total + (len(self.attns) + len(self.ffs)) * fl.elementwise(*shape), tuple(shape)


def parallel_pair_block(x, block: ParallelBlock):
    return block(x)


class ClassAttentionBlock(Module):
    """Updates only the leading token(s) by attending over [lead, patches]."""

    def __init__(self, dim, heads, dim_head, mlp_dim, rng):
        self.attn = CrossAttention(dim, heads, rng, dim_head)
        self.ff = FeedForward(dim, mlp_dim, rng)

    def forward(self, lead, patches):
        lead = lead + self.attn(lead, patches)
        return lead + self.ff(lead)

    def flops(self, lead_shape, n_patches, fpm=1.0):
        a, _ = self.attn.flops(lead_shape, n_patches, fpm)
        f, _ = self.ff.flops(lead_shape, fpm)
        return a + f + 2 * fl.elementwise(*lead_shape), tuple(lead_shape)


class CrossFusion(Module):
    """Fuse branch A's class token with branch B's patch tokens.

    The class token is projected to B's width, attends over itself plus B's
    patches, is projected back and added residually. A's patch tokens pass
    through untouched.
    """

    def __init__(self, dim_a, dim_b, heads, dim_head, rng):
        self.proj_in = Linear(dim_a, dim_b, rng)
        self.attn = CrossAttention(dim_b, heads, rng, dim_head)
        self.proj_out = Linear(dim_b, dim_a, rng)

    def forward(self, tokens_a, tokens_b):
        cls = tokens_a[:, :1]
        c = self.proj_in(cls)
        c = self.attn(c, tokens_b[:, 1:])
        cls = cls + self.proj_out(c)
        return ops.concat([cls, tokens_a[:, 1:]], axis=1)

    def flops(self, shape_a, shape_b, fpm=1.0):
        b = shape_a[0]
        total, s = self.proj_in.flops((b, 1, shape_a[2]), fpm)
        c, s = self.attn.flops(s, shape_b[1] - 1, fpm)
        total += c
        c, s = self.proj_out.flops(s, fpm)
        return total + c + fl.elementwise(*s), tuple(shape_a)


def cross_attention_fuse(small, large, fuse_small: CrossFusion, fuse_large: CrossFusion):
    """Exchange class-token information between two branches."""
    return fuse_small(small, large), fuse_large(large, small)


class ViTBackbone(Module):
    """Patch embedding, optional class token, a stack of blocks, final norm.

    ``block`` selects standard, re-attention or parallel blocks. Returns the
    full token sequence; a lead token passed to ``forward`` (count token) is
    prepended in place of the class token.
    """

    output = "tokens"

    def __init__(self, image_size, patch_size, dim, depth, heads, mlp_dim, rng, dim_head=None,
                 cls_token=True, block="standard"):
        self.dim = dim
        self.embed = PatchEmbed(image_size, patch_size, dim, rng)
        self.cls_token = parameter(trunc_normal(rng, (dim,))) if cls_token else None
        self.blocks = []
        for _ in range(depth):
            if block == "parallel":
                self.blocks.append(ParallelBlock(
                    [Attention(dim, heads, rng, dim_head) for _ in range(2)],
                    [FeedForward(dim, mlp_dim, rng) for _ in range(2)]))
            else:
                attn = Attention(dim, heads, rng, dim_head, reattention=block == "reattention")
                self.blocks.append(Block(attn, FeedForward(dim, mlp_dim, rng)))
        self.norm = LayerNorm(dim)

    def n_lead(self, lead=False) -> int:
        return int(self.cls_token is not None or lead)

    def forward(self, x, lead=None):
        t = self.embed(x)
        token = lead if lead is not None else self.cls_token
        if token is not None:
            t = _prepend(token, t)
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)

    def flops(self, shape, fpm=1.0, lead=False):
        total, s = self.embed.flops(shape, fpm)
        s = (s[0], s[1] + self.n_lead(lead), s[2])
        for blk in self.blocks:
            total += blk.flops(s, fpm)[0]
        return total + self.norm.flops(s, fpm)[0], s


class XCiTBackbone(Module):
    """Cross-covariance blocks over patch tokens, then class-attention layers
    that update the lead token, then a final norm over the whole sequence."""

    output = "tokens"

    def __init__(self, image_size, patch_size, dim, depth, heads, mlp_dim, rng, dim_head=None,
                 cls_token=True, cls_depth=1):
        self.dim = dim
        self.embed = PatchEmbed(image_size, patch_size, dim, rng)
        self.cls_token = parameter(trunc_normal(rng, (dim,))) if cls_token else None
        self.blocks = [Block(XCAttention(dim, heads, rng, dim_head), FeedForward(dim, mlp_dim, rng))
                       for _ in range(depth)]
        self.cls_blocks = [ClassAttentionBlock(dim, heads, dim_head or dim // heads, mlp_dim, rng)
                           for _ in range(cls_depth)]
        self.norm = LayerNorm(dim)

    def n_lead(self, lead=False) -> int:
        return int(self.cls_token is not None or lead)

    def forward(self, x, lead=None):
        t = self.embed(x)
        for blk in self.blocks:
            t = blk(t)
        token = lead if lead is not None else self.cls_token
        if token is None:
            return self.norm(t)
        b, _, d = t.shape
        cls = ops.expand(ops.reshape(token, (1, 1, d)), (b, 1, d))
        for blk in self.cls_blocks:
            cls = blk(cls, t)
        return self.norm(ops.concat([cls, t], axis=1))

    def flops(self, shape, fpm=1.0, lead=False):
        total, s = self.embed.flops(shape, fpm)
        for blk in self.blocks:
            total += blk.flops(s, fpm)[0]
        b, n, d = s
        if self.n_lead(lead):
            for blk in self.cls_blocks:
                total += blk.flops((b, 1, d), n, fpm)[0]
            n += 1
        return total + fl.elementwise(b, n, d), (b, n, d)


class MultiScaleBlock(Module):
    def __init__(self, dims, heads, dim_head, mlp_dims, depths, cross_depth, rng):
        self.branches = []
        for dim, mlp, depth in zip(dims, mlp_dims, depths):
            self.branches.append([Block(Attention(dim, heads, rng, dim_head), FeedForward(dim, mlp, rng))
                                  for _ in range(depth)])
        self.fusions = [(CrossFusion(dims[0], dims[1], heads, dim_head, rng),
                         CrossFusion(dims[1], dims[0], heads, dim_head, rng)) for _ in range(cross_depth)]

    def children(self):
        for i, branch in enumerate(self.branches):
            for j, blk in enumerate(branch):
                yield f"branches.{i}.{j}", blk
        for i, (a, b) in enumerate(self.fusions):
            yield f"fusions.{i}.0", a
            yield f"fusions.{i}.1", b

    def forward(self, small, large):
        for blk in self.branches[0]:
            small = blk(small)
        for blk in self.branches[1]:
            large = blk(large)
        for fa, fb in self.fusions:
            small, large = cross_attention_fuse(small, large, fa, fb)
        return small, large

    def flops(self, s_small, s_large, fpm=1.0):
        total = sum(blk.flops(s_small, fpm)[0] for blk in self.branches[0])
        total += sum(blk.flops(s_large, fpm)[0] for blk in self.branches[1])
        for fa, fb in self.fusions:
            total += fa.flops(s_small, s_large, fpm)[0] + fb.flops(s_large, s_small, fpm)[0]
        return total


class CrossViTBackbone(Module):
    """Two patch sizes, each branch with its own class token; returns the
    concatenated, normalised class tokens."""

    output = "features"

    def __init__(self, image_size, patch_sizes, dims, mlp_dims, heads, rng, dim_head=None,
                 depths=(1, 4), cross_depth=1, scales=1):
        self.embeds = [PatchEmbed(image_size, p, d, rng) for p, d in zip(patch_sizes, dims)]
        self.cls_tokens = [parameter(trunc_normal(rng, (d,))) for d in dims]
        self.blocks = [MultiScaleBlock(dims, heads, dim_head, mlp_dims, depths, cross_depth, rng)
                       for _ in range(scales)]
        self.norms = [LayerNorm(d) for d in dims]
        self.feature_dim = sum(dims)

    def forward(self, x, lead=None):
        small, large = (_prepend(tok, emb(x)) for tok, emb in zip(self.cls_tokens, self.embeds))
        for blk in self.blocks:
            small, large = blk(small, large)
        return ops.concat([self.norms[0](small[:, 0]), self.norms[1](large[:, 0])], axis=-1)

    def flops(self, shape, fpm=1.0, lead=False):
        total, shapes = 0.0, []
        for emb in self.embeds:
            c, s = emb.flops(shape, fpm)
            total += c
            shapes.append((s[0], s[1] + 1, s[2]))
        for blk in self.blocks:
            total += blk.flops(shapes[0], shapes[1], fpm)
        b = shape[0]
        total += sum(fl.elementwise(b, s[2]) for s in shapes)
        return total, (b, self.feature_dim)
