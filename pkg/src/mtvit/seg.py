"""Referring-segmentation head: prompt encoder plus two-way mask decoder.

A phrase becomes a prompt embedding (mean of learned token embeddings
through a one-layer perceptron). The decoder runs two-way attention
between a two-token query set {prompt, output token} and the final
backbone features, then scores upsampled per-pixel features against the
refined output token to emit a logit map at image resolution.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError, VocabularyError
from .nn import CrossAttention, LayerNorm, Linear, Mlp, Module, MultiHeadAttention
from .rng import derive_seed
from .tensor import Tensor, seeded_init


class PromptEncoder(Module):
    def __init__(self, vocab_size: int, dim: int, seed: int):
        self.embed = seeded_init([vocab_size, dim], "uniform-fan-in",
                                 derive_seed(seed, "seg.prompt_embed"), requires_grad=True)
        self.fc = Linear(dim, dim, seed, "seg.prompt_fc")
        self._vocab = vocab_size

    def embed_prompt(self, phrases) -> Tensor:
        """One phrase (list of ids) -> (D,), or a batch of phrases -> (B, D).

        The embedding is the mean over the phrase's token embeddings put
        through the perceptron, so duplicating a phrase's tokens does not
        change it.
        """
        single = len(phrases) > 0 and np.asarray(phrases[0]).ndim == 0
        batch = [phrases] if single else list(phrases)
        if not batch:
            raise ValueError("empty phrase batch")
        l_max = 0
        for phrase in batch:
            ids = np.asarray(phrase, dtype=np.int64)
            if ids.size == 0:
                raise ValueError("empty phrase")
            if ids.min() < 0 or ids.max() >= self._vocab:
                raise VocabularyError(f"token id outside vocabulary of {self._vocab}")
            l_max = max(l_max, ids.size)
        ids = np.zeros((len(batch), l_max), dtype=np.int64)
        mask = np.zeros((len(batch), l_max, 1), dtype=np.float64)
        for i, phrase in enumerate(batch):
            arr = np.asarray(phrase, dtype=np.int64)
            ids[i, : arr.size] = arr
            mask[i, : arr.size] = 1.0
        tok = T.gather_rows(self.embed, ids)  # (B, L, D)
        mean = (tok * mask).sum(axis=1) / mask.sum(axis=1)
        out = self.fc(mean)
        return out[0] if single else out


class _TwoWayBlock(Module):
    def __init__(self, dim: int, num_heads: int, seed: int, name: str):
        self.self_attn = MultiHeadAttention(dim, num_heads, seed, f"{name}.self")
        self.norm1 = LayerNorm(dim)
        self.q_to_img = CrossAttention(dim, num_heads, seed, f"{name}.q2i")
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, dim, seed, f"{name}.mlp")
        self.norm3 = LayerNorm(dim)
        self.img_to_q = CrossAttention(dim, num_heads, seed, f"{name}.i2q")
        self.norm4 = LayerNorm(dim)

    def __call__(self, queries: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        queries = self.norm1(queries + self.self_attn(queries))
        queries = self.norm2(queries + self.q_to_img(queries, image))
        queries = self.norm3(queries + self.mlp(queries))
        image = self.norm4(image + self.img_to_q(image, queries))
        return queries, image


class SegHead(Module):
    """Mask decoder over {prompt token, output token} and image tokens."""

    def __init__(self, backbone_dim: int, patch_size: int, num_heads: int, seed: int,
                 num_blocks: int = 2):
        self.output_token = seeded_init([1, backbone_dim], "uniform-fan-in",
                                        derive_seed(seed, "seg.output_token"), requires_grad=True)
        self.blocks = [
            _TwoWayBlock(backbone_dim, num_heads, seed, f"seg.block{i}")
            for i in range(num_blocks)
        ]
        self.final_attn = CrossAttention(backbone_dim, num_heads, seed, "seg.final")
        self.final_norm = LayerNorm(backbone_dim)
        self.mask_mlp = Mlp(backbone_dim, backbone_dim, seed, "seg.mask_mlp")
        self.pixel_fc = Linear(backbone_dim, backbone_dim, seed, "seg.pixel_fc")
        self._patch = patch_size

    def predict_mask(self, f_final: Tensor, prompt: Tensor, image_side: int | None = None) -> Tensor:
        """Final-layer tokens + prompt embedding -> (B?, H, W) mask logits."""
        single = f_final.ndim == 2
        img = f_final.reshape(1, *f_final.shape) if single else f_final
        b, n, d = img.shape
        g = int(round(np.sqrt(n)))
        if g * g != n:
            raise ShapeError(f"token count {n} is not a square grid")
        if image_side is None:
            image_side = g * self._patch
        prm = prompt.reshape(1, *prompt.shape) if prompt.ndim == 1 else prompt
        if prm.shape != (b, d):
            raise ShapeError(f"prompt shape {prm.shape} does not match features {img.shape}")

        out_tok = self.output_token + Tensor(np.zeros((b, 1, d)))
        queries = T.concat([prm.reshape(b, 1, d), out_tok], axis=1)
        for block in self.blocks:
            queries, img = block(queries, img)
        queries = self.final_norm(queries + self.final_attn(queries, img))
        mask_embed = self.mask_mlp(queries[:, 1])  # (B, D)

        # score tokens against the output embedding, then upsample; the
        # channel dot product commutes with the (linear) bilinear resize
        feats = self.pixel_fc(img).reshape(b, g, g, d)
        grid_logits = (feats * mask_embed.reshape(b, 1, 1, d)).sum(axis=-1)
        logits = T.bilinear_resize(grid_logits, image_side, image_side)
        return logits[0] if single else logits
