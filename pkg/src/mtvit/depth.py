"""Dense depth head fusing three backbone layers coarse-to-fine.

Each selected token matrix is reassembled into its spatial grid and
projected to a shared width; the deepest level is pooled to half
resolution, fused upward through residual 1x1 mixing blocks with
bilinear x2 upsampling between stages, and a final mixing pair emits a
single-channel map resized to the image resolution. The output is an
unconstrained relative-depth map (the training losses remove scale and
shift anyway).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .nn import Linear, Module
from .tensor import Tensor


def _to_grid(tokens: Tensor) -> tuple[Tensor, int]:
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
    b, n, d = tokens.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"token count {n} is not a square grid")
    return tokens.reshape(b, g, g, d), g


def _pool2(x: Tensor) -> Tensor:
    # channels-last map -> pool the spatial axes
    return T.avg_pool2(x.transpose(0, 3, 1, 2)).transpose(0, 2, 3, 1)


def _resize(x: Tensor, h: int, w: int) -> Tensor:
    return T.bilinear_resize(x.transpose(0, 3, 1, 2), h, w).transpose(0, 2, 3, 1)


class _MixBlock(Module):
    """Residual per-pixel channel mixing: x + W2 relu(W1 x)."""

    def __init__(self, width: int, seed: int, name: str):
        self.fc1 = Linear(width, width, seed, f"{name}.fc1")
        self.fc2 = Linear(width, width, seed, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.fc2(T.relu(self.fc1(x)))


class DepthHead(Module):
    def __init__(self, backbone_dim: int, width: int, seed: int):
        self.proj = [Linear(backbone_dim, width, seed, f"depth.proj{i}") for i in range(3)]
        self.fuse = [_MixBlock(width, seed, f"depth.fuse{i}") for i in range(3)]
        self.head_fc1 = Linear(width, width // 2, seed, "depth.head_fc1")
        self.head_fc2 = Linear(width // 2, 1, seed, "depth.head_fc2")

    def predict_depth(self, selected: list[Tensor], image_side: int) -> Tensor:
        """Three token matrices (shallow to deep) -> (B?, H, W) depth map."""
        if len(selected) != 3:
            raise ShapeError(f"expected 3 selected layers, got {len(selected)}")
        single = selected[0].ndim == 2
        grids = []
        g = None
        for level, tokens in enumerate(selected):
            grid, side = _to_grid(tokens)
            if g is None:
                g = side
            elif side != g:
                raise ShapeError("selected layers disagree on grid size")
            grids.append(self.proj[level](grid))
        if g % 2:
            raise ShapeError(f"grid side {g} must be even for the coarse stage")

        x = self.fuse[2](_pool2(grids[2]))             # deepest, at g/2
        x = _resize(x, g, g) + grids[1]                # mid, at g
        x = self.fuse[1](x)
        x = _resize(x, 2 * g, 2 * g) + _resize(grids[0], 2 * g, 2 * g)
        x = self.fuse[0](x)
        y = self.head_fc2(T.relu(self.head_fc1(x)))    # (B, 2g, 2g, 1)
        y = T.bilinear_resize(y.transpose(0, 3, 1, 2), image_side, image_side)
        out = y.reshape(y.shape[0], image_side, image_side)
        return out[0] if single else out
