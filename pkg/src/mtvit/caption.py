"""Captioning head: vision projector plus a tiny autoregressive decoder.

The projector maps final-layer backbone tokens into the decoder width;
projected tokens are prepended to the text embedding sequence and a
causal decoder is trained with teacher forcing. The loss averages the
per-token cross-entropy over the supervised positions, so sequence
length never changes the loss scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import LayerNorm, Linear, Module, TransformerBlock, causal_mask
from .rng import derive_seed
from .tensor import Tensor, seeded_init

BOS_ID = 1
PAD_ID = 0


@dataclass(frozen=True)
class CaptionConfig:
    d_text: int = 64
    num_layers: int = 2
    num_heads: int = 4
    vocab_size: int = 64
    max_text_len: int = 24  # t_0 plus supervised tokens

    def validate(self, key_prefix: str = "caption") -> None:
        for field in ("d_text", "num_layers", "num_heads", "vocab_size", "max_text_len"):
            if getattr(self, field) <= 0:
                raise ConfigError(f"{key_prefix}.{field}", "must be positive")
        if self.d_text % self.num_heads != 0:
            raise ConfigError(f"{key_prefix}.d_text", "not divisible by num_heads")


def sequence_ce(text_logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean cross-entropy over supervised positions.

    ``text_logits`` is (B, L, V); ``targets`` the token ids to predict;
    ``mask`` marks real (non-padding) positions. Each sample is averaged
    over its own length first, then the batch is averaged, so repeating
    a sequence leaves the value unchanged.
    """
    if mask.sum() == 0:
        raise ValueError("no supervised positions in the batch")
    logp = T.log_softmax(text_logits, axis=-1)
    nll = -T.take_along_last(logp, targets)
    per_sample = (nll * mask).sum(axis=-1) / np.maximum(mask.sum(axis=-1), 1.0)
    alive = mask.sum(axis=-1) > 0
    return (per_sample * alive.astype(float)).sum() / float(alive.sum())


class CaptionHead(Module):
    """Projector, token/positional embeddings, causal blocks, vocab readout."""

    def __init__(self, backbone_dim: int, visual_tokens: int, config: CaptionConfig, seed: int):
        config.validate()
        self.config = config
        d = config.d_text
        self.proj_fc1 = Linear(backbone_dim, d, seed, "caption.proj_fc1")
        self.proj_fc2 = Linear(d, d, seed, "caption.proj_fc2")
        self.tok_embed = seeded_init([config.vocab_size, d], "uniform-fan-in",
                                     derive_seed(seed, "caption.tok_embed"), requires_grad=True)
        self._visual_tokens = visual_tokens
        ctx = visual_tokens + config.max_text_len
        self.pos = seeded_init([ctx, d], "uniform-fan-in",
                               derive_seed(seed, "caption.pos"), requires_grad=True)
        self.blocks = [
            TransformerBlock(d, config.num_heads, 1, seed, f"caption.block{i}")
            for i in range(config.num_layers)
        ]
        self.norm = LayerNorm(d)
        self.out = Linear(d, config.vocab_size, seed, "caption.out")

    def projector_params(self):
        """The alignment-warm-up trainable group."""
        for name, p in self.named_params():
            if name.startswith("proj_"):
                yield f"caption/{name}", p

    def project(self, f_final: Tensor) -> Tensor:
        """Map backbone tokens (B?, T, D) into decoder space (B?, T, d_text)."""
        return self.proj_fc2(T.relu(self.proj_fc1(f_final)))

    def _pad_batch(self, sequences) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
        v = self.config.vocab_size
        for s in seqs:
            if s.size < 2:
                raise ValueError("a caption needs t_0 plus at least one supervised token")
            if s.min() < 0 or s.max() >= v:
                raise ShapeError(f"token id out of range [0, {v})")
            if s.size - 1 > self.config.max_text_len:
                raise ShapeError(f"sequence of {s.size} tokens exceeds context {self.config.max_text_len}")
        l_max = max(s.size - 1 for s in seqs)
        inputs = np.full((len(seqs), l_max), PAD_ID, dtype=np.int64)
        targets = np.full((len(seqs), l_max), PAD_ID, dtype=np.int64)
        mask = np.zeros((len(seqs), l_max), dtype=np.float64)
        for i, s in enumerate(seqs):
            n = s.size - 1
            inputs[i, :n] = s[:-1]
            targets[i, :n] = s[1:]
            mask[i, :n] = 1.0
        return inputs, targets, mask

    def _pos_for(self, m: int, l: int) -> Tensor:
        """Positional rows for an m-token visual prefix plus l text tokens.

        A prefix length other than the configured one (images at a new
        resolution) gets its grid segment bilinearly resized, matching
        the backbone's resolution transfer.
        """
        m0 = self._visual_tokens
        if m == m0:
            return self.pos[: m + l]
        g0, g = int(round(np.sqrt(m0))), int(round(np.sqrt(m)))
        if g0 * g0 != m0 or g * g != m:
            raise ShapeError(f"visual prefix of {m} tokens is not a square grid")
        d = self.config.d_text
        grid = self.pos[:m0].reshape(g0, g0, d).transpose(2, 0, 1)
        grid = T.bilinear_resize(grid, g, g).transpose(1, 2, 0).reshape(m, d)
        return T.concat([grid, self.pos[m0 : m0 + l]], axis=0)

    def text_logits(self, visual_embeddings: Tensor, inputs: np.ndarray) -> Tensor:
        """Decoder logits at the text positions (one per input token)."""
        single = visual_embeddings.ndim == 2
        vis = visual_embeddings.reshape(1, *visual_embeddings.shape) if single else visual_embeddings
        b, m, d = vis.shape
        l = inputs.shape[1]
        if l > self.config.max_text_len:
            raise ShapeError(f"text length {l} exceeds decoder context {self.config.max_text_len}")
        txt = T.gather_rows(self.tok_embed, inputs)  # (B, L, d)
        x = T.concat([vis, txt], axis=1) + self._pos_for(m, l)
        mask = causal_mask(m + l, dtype=x.data.dtype)
        for block in self.blocks:
            x = block(x, mask=mask)
        logits = self.out(self.norm(x))
        return logits[:, m : m + l]

    def caption_loss(self, visual_embeddings: Tensor, sequences) -> Tensor:
        """Teacher-forced mean cross-entropy of the supervised tokens.

        ``sequences`` is one token sequence (t_0 .. t_L) or a list of
        them; visual embeddings form an unsupervised prefix.
        """
        if np.asarray(sequences[0]).ndim == 0:
            sequences = [sequences]
        if visual_embeddings.ndim == 2:
            visual_embeddings = visual_embeddings.reshape(1, *visual_embeddings.shape)
            if len(sequences) > 1:
                raise ShapeError("one visual embedding but several sequences")
        inputs, targets, mask = self._pad_batch(sequences)
        logits = self.text_logits(visual_embeddings, inputs)
        return sequence_ce(logits, targets, mask)

    def token_accuracy(self, visual_embeddings: Tensor, sequences) -> float:
        """Fraction of supervised positions predicted greedily correctly."""
        if np.asarray(sequences[0]).ndim == 0:
            sequences = [sequences]
        inputs, targets, mask = self._pad_batch(sequences)
        with T.no_grad():
            logits = self.text_logits(visual_embeddings, inputs)
        pred = logits.data.argmax(axis=-1)
        hits = ((pred == targets) * mask).sum()
        return float(hits / mask.sum())
