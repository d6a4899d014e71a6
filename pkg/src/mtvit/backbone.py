"""Shared vision-transformer backbone.

Images are patchified into tokens, run through N pre-norm transformer
blocks, and the token features after every block are exposed as a
pyramid for the task heads. The caption and segmentation heads read the
final layer; the depth head reads three uniformly sampled layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import Module, TransformerBlock, Linear
from .rng import derive_seed
from .tensor import Tensor, seeded_init


@dataclass(frozen=True)
class BackboneConfig:
    patch_size: int = 4
    num_layers: int = 6
    embed_dim: int = 64
    num_heads: int = 4
    image_side: int = 32
    mlp_ratio: int = 2

    def validate(self, key_prefix: str = "backbone") -> None:
        if self.image_side % self.patch_size != 0:
            raise ConfigError(f"{key_prefix}.image_side",
                              f"{self.image_side} not divisible by patch_size {self.patch_size}")
        if self.num_layers < 3:
            raise ConfigError(f"{key_prefix}.num_layers", "need at least 3 layers")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(f"{key_prefix}.embed_dim",
                              f"{self.embed_dim} not divisible by num_heads {self.num_heads}")
        for field in ("patch_size", "num_layers", "embed_dim", "num_heads", "image_side", "mlp_ratio"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{key_prefix}.{field}", "must be positive")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """(H, W, 3) or (B, H, W, 3) image -> (B?, num_patches, 3*P*P) tokens.

    Row k holds the flattened pixels of patch k in raster order, so
    :func:`unpatchify` is an exact inverse.
    """
    single = image.ndim == 3
    if single:
        image = image.reshape(1, *image.shape)
    b, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = image.reshape(b, h // p, p, w // p, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)  # (B, gh, gw, p, p, c)
    tokens = x.reshape(b, (h // p) * (w // p), p * p * c)
    return tokens[0] if single else tokens


def unpatchify(tokens: Tensor, image_side: int, patch_size: int) -> Tensor:
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    b, n, d = tokens.shape
    p = patch_size
    g = image_side // p
    if n != g * g or d % (p * p) != 0:
        raise ShapeError(f"token matrix {n}x{d} does not match side {image_side}, patch {p}")
    c = d // (p * p)
    x = tokens.reshape(b, g, g, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, image_side, image_side, c)
    return x[0] if single else x


def select_uniform(pyramid: list[Tensor], k: int = 3) -> list[Tensor]:
    """Uniformly sample k layers, always anchoring the deepest.

    Indices are round(j*N/k) for j = 1..k (1-based, round half up).
    """
    n = len(pyramid)
    if k > n:
        raise ConfigError("depth.sampled_layers", f"cannot sample {k} from {n} layers")
    idx = sorted({int(np.floor(j * n / k + 0.5)) for j in range(1, k + 1)})
    if len(idx) != k:
        raise ConfigError("depth.sampled_layers", f"sampling rule collapsed indices for N={n}, k={k}")
    return [pyramid[i - 1] for i in idx]


def uniform_indices(n: int, k: int = 3) -> list[int]:
    """1-based layer indices the sampler picks (for logging/tests)."""
    return sorted({int(np.floor(j * n / k + 0.5)) for j in range(1, k + 1)})


class VisionBackbone(Module):
    """Patch embedding + learned positional grid + N transformer blocks."""

    def __init__(self, config: BackboneConfig, seed: int):
        config.validate()
        self.config = config
        d = config.embed_dim
        self.patch_embed = Linear(3 * config.patch_size**2, d, seed, "backbone.patch_embed")
        self.pos = seeded_init([config.tokens, d], "uniform-fan-in",
                               derive_seed(seed, "backbone.pos"), requires_grad=True)
        self.blocks = [
            TransformerBlock(d, config.num_heads, config.mlp_ratio, seed, f"backbone.block{i}")
            for i in range(config.num_layers)
        ]

    def _pos_for_grid(self, grid: int) -> Tensor:
        g0 = self.config.grid
        if grid == g0:
            return self.pos
        # interpolate the positional grid when probing at a new resolution
        d = self.config.embed_dim
        p = self.pos.reshape(g0, g0, d).transpose(2, 0, 1)
        p = T.bilinear_resize(p, grid, grid)
        return p.transpose(1, 2, 0).reshape(grid * grid, d)

    def forward_features(self, image: Tensor) -> list[Tensor]:
        """All N post-block token features, shallow to deep.

        Accepts (H, W, 3) or (B, H, W, 3); H must equal W and divide by
        the patch size. Deterministic given parameters.
        """
        single = image.ndim == 3
        h = image.shape[-3]
        w = image.shape[-2]
        if h != w:
            raise ShapeError(f"expected a square image, got {h}x{w}")
        tokens = patchify(image if not single else image.reshape(1, *image.shape),
                          self.config.patch_size)
        x = self.patch_embed(tokens) + self._pos_for_grid(h // self.config.patch_size)
        pyramid = []
        for block in self.blocks:
            x = block(x)
            pyramid.append(x[0] if single else x)
        return pyramid
