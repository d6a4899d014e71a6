"""Small neural building blocks shared by the backbone and task heads.

Every layer exposes ``named_params()`` yielding (name, Tensor) pairs in a
stable order; parameter initialization is derived from a master seed and
the parameter's full name, so models are reproducible and checkpoint
names never depend on construction order.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import derive_seed
from .tensor import Tensor, seeded_init


class Module:
    """Base class: children and parameters are discovered by attribute order."""

    def named_params(self, prefix: str = ""):
        for key, value in vars(self).items():
            name = f"{prefix}{key}" if not prefix else f"{prefix}/{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_params(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{name}/{i}")

    def params(self):
        return [p for _, p in self.named_params()]


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int, name: str):
        self.w = seeded_init([d_in, d_out], "uniform-fan-in", derive_seed(seed, name, "w"),
                             requires_grad=True)
        self.b = seeded_init([d_out], "zeros", 0, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        orig = x.shape
        if x.ndim > 2:
            x = x.reshape(-1, orig[-1])
        y = T.linear(x, self.w, self.b)
        if len(orig) > 2:
            y = y.reshape(*orig[:-1], self.w.shape[1])
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = seeded_init([dim], "ones", 0, requires_grad=True)
        self.beta = seeded_init([dim], "zeros", 0, requires_grad=True)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self._eps)


class MultiHeadAttention(Module):
    """Self-attention with a fused qkv projection; optional additive mask."""

    def __init__(self, dim: int, num_heads: int, seed: int, name: str):
        assert dim % num_heads == 0
        self.qkv = Linear(dim, 3 * dim, seed, f"{name}.qkv")
        self.out = Linear(dim, dim, seed, f"{name}.out")
        self._h = num_heads
        self._dh = dim // num_heads

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, t, d = x.shape
        h, dh = self._h, self._dh
        qkv = self.qkv(x).reshape(b, t, 3, h, dh).transpose(2, 0, 3, 1, 4)  # (3,B,h,T,dh)
        q, k, v = qkv[0] * (dh**-0.5), qkv[1], qkv[2]
        scores = q @ k.transpose(0, 1, 3, 2)  # (B,h,T,T)
        if mask is not None:
            scores = scores + mask
        attn = T.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.out(ctx)


class CrossAttention(Module):
    """Queries from one stream attend over keys/values from another."""

    def __init__(self, dim: int, num_heads: int, seed: int, name: str):
        assert dim % num_heads == 0
        self.q = Linear(dim, dim, seed, f"{name}.q")
        self.kv = Linear(dim, 2 * dim, seed, f"{name}.kv")
        self.out = Linear(dim, dim, seed, f"{name}.out")
        self._h = num_heads
        self._dh = dim // num_heads

    def __call__(self, queries: Tensor, context: Tensor) -> Tensor:
        b, tq, d = queries.shape
        tk = context.shape[1]
        h, dh = self._h, self._dh
        q = self.q(queries).reshape(b, tq, h, dh).transpose(0, 2, 1, 3) * (dh**-0.5)
        kv = self.kv(context).reshape(b, tk, 2, h, dh).transpose(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        attn = T.softmax(q @ k.transpose(0, 1, 3, 2), axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self.out(ctx)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, seed: int, name: str):
        self.fc1 = Linear(dim, hidden, seed, f"{name}.fc1")
        self.fc2 = Linear(hidden, dim, seed, f"{name}.fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.relu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm block with a ReLU MLP."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int, seed: int, name: str):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads, seed, f"{name}.attn")
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio * dim, seed, f"{name}.mlp")

    def __call__(self, x: Tensor, mask: np.ndarray | None = None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.mlp(self.norm2(x))


def causal_mask(t: int, dtype=np.float64) -> np.ndarray:
    """Additive (T, T) mask: position i may attend to positions <= i."""
    m = np.zeros((t, t), dtype=dtype)
    m[np.triu_indices(t, k=1)] = -1e9
    return m
