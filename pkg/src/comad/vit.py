"""Vision Transformer encoder: patchify, patch embedding, class token, pre-norm blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, DimensionError, NumericError
from .nn import MLP, LayerNorm, Linear, Module, trunc_normal


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    in_channels: int = 3
    embed_dim: int = 32
    depth: int = 4
    num_heads: int = 2
    mlp_ratio: float = 4.0

    def __post_init__(self):
        for name in ("image_size", "patch_size", "in_channels", "embed_dim", "num_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"vit.{name} must be >= 1, got {getattr(self, name)}")
        if self.depth < 0:
            raise ConfigError(f"vit.depth must be >= 0, got {self.depth}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size**2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.in_channels

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)


# ViT-Tiny / ViT-Base shapes at 224px, for reference runs.
VIT_TINY = ViTConfig(image_size=224, patch_size=16, embed_dim=192, depth=12, num_heads=3)
VIT_BASE = ViTConfig(image_size=224, patch_size=16, embed_dim=768, depth=12, num_heads=12)


def patchify(images, patch_size: int) -> Tensor:
    """[B, C, H, W] -> [B, N, C*P*P], patches row-major, channel-major inside a patch."""
    images = ag.as_tensor(images)
    if images.ndim != 4:
        raise DimensionError(f"patchify expects [B, C, H, W], got {images.shape}")
    b, c, h, w = images.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} is not divisible into {p}x{p} patches")
    gh, gw = h // p, w // p
    x = images.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, gh * gw, c * p * p)


def unpatchify(patches, patch_size: int, height: int, width: int, channels: int = 3) -> Tensor:
    """Exact inverse of :func:`patchify`."""
    patches = ag.as_tensor(patches)
    b, n, d = patches.shape
    p = patch_size
    gh, gw = height // p, width // p
    if n != gh * gw or d != channels * p * p:
        raise DimensionError(f"patches {patches.shape} do not tile a {channels}x{height}x{width} image with P={p}")
    x = patches.reshape(b, gh, gw, channels, p, p).transpose(0, 3, 1, 4, 2, 5)
    return x.reshape(b, channels, height, width)


class Attention(Module):
    def __init__(self, dim: int, num_heads: int, rng, dtype):
        super().__init__()
        self.num_heads = num_heads
        self.q = self.add_module("q", Linear(dim, dim, rng, dtype))
        self.k = self.add_module("k", Linear(dim, dim, rng, dtype))
        self.v = self.add_module("v", Linear(dim, dim, rng, dtype))
        self.o = self.add_module("o", Linear(dim, dim, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        h = self.num_heads
        dh = d // h

        def heads(y):
            return y.reshape(b, t, h, dh).transpose(0, 2, 1, 3)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        scores = (q @ ag.swap_last(k)) * (1.0 / math.sqrt(dh))
        out = ag.softmax(scores, axis=-1) @ v
        return self.o(out.transpose(0, 2, 1, 3).reshape(b, t, d))


class Block(Module):
    """Pre-norm transformer block: x + Attn(LN(x)), then x + MLP(LN(x))."""

    def __init__(self, cfg: ViTConfig, rng, dtype):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = self.add_module("norm1", LayerNorm(d, dtype))
        self.attn = self.add_module("attn", Attention(d, cfg.num_heads, rng, dtype))
        self.norm2 = self.add_module("norm2", LayerNorm(d, dtype))
        self.mlp = self.add_module("mlp", MLP(d, int(d * cfg.mlp_ratio), d, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class ViTEncoder(Module):
    """Patch projection, positional embeddings, class token, ``depth`` blocks, final LayerNorm.

    ``pos_embed`` row 0 belongs to the class token; rows 1..N to the patches.
    """

    def __init__(self, cfg: ViTConfig, rng: np.random.Generator | int = 0, dtype="f32"):
        super().__init__()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        dtype = ag.resolve_dtype(dtype)
        self.cfg = cfg
        d = cfg.embed_dim
        self.patch_proj = self.add_module("patch_proj", Linear(cfg.patch_dim, d, rng, dtype))
        self.pos_embed = self.add_param("pos_embed", trunc_normal(rng, (cfg.num_patches + 1, d), dtype=dtype))
        self.cls_token = self.add_param("cls_token", trunc_normal(rng, (d,), dtype=dtype))
        self.blocks = [self.add_module(f"blocks.{i}", Block(cfg, rng, dtype)) for i in range(cfg.depth)]
        self.norm = self.add_module("norm", LayerNorm(d, dtype))

    def embed(self, patches) -> Tensor:
        """[B, N, P*P*C] -> [B, N+1, D]: project patches, prepend class token, add positions."""
        patches = ag.cast(ag.as_tensor(patches), self.pos_embed.dtype)
        if patches.ndim != 3 or patches.shape[-1] != self.cfg.patch_dim:
            raise DimensionError(f"patches {patches.shape} do not match patch_dim {self.cfg.patch_dim}")
        b, n, _ = patches.shape
        if n != self.cfg.num_patches:
            raise DimensionError(f"got {n} patches, encoder expects {self.cfg.num_patches}")
        tokens = self.patch_proj(patches) + self.pos_embed[1:]
        cls = (self.cls_token + self.pos_embed[0]).reshape(1, 1, -1)
        cls = ag.add(ag.Tensor(np.zeros((b, 1, 1), dtype=tokens.dtype)), cls)
        return ag.concat([cls, tokens], axis=1)

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-1] != self.cfg.embed_dim:
            raise DimensionError(f"token width {tokens.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        x = tokens
        for i, block in enumerate(self.blocks):
            try:
                x = block(x)
            except NumericError as exc:
                raise NumericError(f"block {i}: {exc}") from exc
            if not np.isfinite(x.data).all():
                raise NumericError(f"non-finite activations after block {i}")
        return self.norm(x)

    __call__ = forward

    def encode(self, images) -> Tensor:
        """Unmasked pass: pixels -> output tokens."""
        return self.forward(self.embed(patchify(images, self.cfg.patch_size)))
