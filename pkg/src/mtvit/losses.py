"""Task losses and the combined multi-task objective.

Depth uses an affine-invariant absolute error plus a multi-scale
gradient-matching term; segmentation uses per-pixel BCE plus Dice; the
caption loss lives with the caption head. The combined objective is the
weighted sum over tasks. All functions are pure and differentiable
through the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

MAD_EPS = 1e-6  # guard for constant maps in the mean-absolute-deviation scale
DICE_SMOOTH = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Per-task and per-component loss weights."""

    lambda_cap: float = 1.0 / 3.0
    lambda_depth: float = 1.0 / 3.0
    lambda_seg: float = 1.0 / 3.0
    lambda_ssi: float = 1.0
    lambda_gm: float = 0.5
    lambda_bce: float = 2.0
    lambda_dice: float = 0.5
    gm_scales: int = 4

    def validate(self, key_prefix: str = "losses") -> None:
        for field in ("lambda_cap", "lambda_depth", "lambda_seg", "lambda_ssi",
                      "lambda_gm", "lambda_bce", "lambda_dice"):
            if getattr(self, field) < 0:
                raise ConfigError(f"{key_prefix}.{field}", "must be >= 0")
        if self.lambda_cap + self.lambda_depth + self.lambda_seg <= 0:
            raise ConfigError(f"{key_prefix}.lambda_cap", "task weights must not all be zero")
        if self.gm_scales < 1:
            raise ConfigError(f"{key_prefix}.gm_scales", "need at least one scale")


def _as_batch(d) -> tuple[Tensor, bool]:
    t = d if isinstance(d, Tensor) else Tensor(np.asarray(d, dtype=T.default_dtype()))
    if t.ndim == 2:
        return t.reshape(1, *t.shape), True
    if t.ndim == 3:
        return t, False
    raise ShapeError(f"expected an HxW map or a batch of them, got shape {t.shape}")


def affine_normalize(d: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Remove per-map translation and scale.

    Translation is the median; scale is the mean absolute deviation from
    it, floored at a small epsilon so constant maps normalize to zero.
    Returns (normalized map, translation, scale actually used). Accepts
    (H, W) or (B, H, W).
    """
    batch, squeeze = _as_batch(d)
    b, h, w = batch.shape
    flat = batch.reshape(b, h * w)
    t = T.median_last(flat, keepdims=True)
    s = T.absolute(flat - t).mean(axis=-1, keepdims=True)
    s_used = T.maximum(s, Tensor(np.full((b, 1), MAD_EPS)))
    norm = ((flat - t) / s_used).reshape(b, h, w)
    if squeeze:
        return norm[0], t[0, 0], s_used[0, 0]
    return norm, t.reshape(b), s_used.reshape(b)


def loss_ssi(d_pred: Tensor, d_gt: Tensor) -> Tensor:
    """Affine-invariant mean absolute error.

    Both maps are normalized independently to zero translation and unit
    scale; the loss is the mean absolute difference of the normalized
    maps, so any positive-scale affine reparameterization of either
    argument leaves it unchanged.
    """
    if d_pred.shape != d_gt.shape:
        raise ShapeError(f"depth maps differ: {d_pred.shape} vs {d_gt.shape}")
    p, _, _ = affine_normalize(d_pred)
    g, _, _ = affine_normalize(d_gt)
    return T.absolute(p - g).mean()


def _grad_terms(x: Tensor) -> tuple[Tensor, Tensor]:
    """Forward differences along x and y, last row/column dropped."""
    dx = x[..., :, 1:] - x[..., :, :-1]
    dy = x[..., 1:, :] - x[..., :-1, :]
    return dx, dy


def loss_gm(d_pred: Tensor, d_gt: Tensor, scales: int = 4) -> Tensor:
    """Multi-scale gradient matching on affine-normalized maps.

    Both maps are normalized first (making the term shift- and
    scale-invariant); at each of K scales the maps are compared through
    forward differences, each scale's absolute-difference sum is divided
    by its pixel count, and the per-scale terms are summed. Scales are
    built by repeated 2x2 average pooling.
    """
    if d_pred.shape != d_gt.shape:
        raise ShapeError(f"depth maps differ: {d_pred.shape} vs {d_gt.shape}")
    batch_p, _ = _as_batch(d_pred)
    batch_g, _ = _as_batch(d_gt)
    h, w = batch_p.shape[-2], batch_p.shape[-1]
    if scales < 1 or 2 ** (scales - 1) > min(h, w):
        raise ConfigError("losses.gm_scales", f"{scales} scales too deep for {h}x{w} maps")
    p, _, _ = affine_normalize(batch_p)
    g, _, _ = affine_normalize(batch_g)
    total = None
    for k in range(scales):
        pdx, pdy = _grad_terms(p)
        gdx, gdy = _grad_terms(g)
        hk, wk = p.shape[-2], p.shape[-1]
        term = (T.absolute(gdx - pdx).sum() + T.absolute(gdy - pdy).sum()) / (hk * wk)
        total = term if total is None else total + term
        if k + 1 < scales:
            p = T.avg_pool2(p)
            g = T.avg_pool2(g)
    return total / batch_p.shape[0]


def loss_depth(d_pred: Tensor, d_gt: Tensor, lambda_ssi: float = 1.0,
               lambda_gm: float = 0.5, scales: int = 4) -> Tensor:
    """Weighted sum of the affine-invariant and gradient-matching terms."""
    if lambda_ssi < 0 or lambda_gm < 0:
        raise ConfigError("losses.lambda_ssi", "depth loss weights must be >= 0")
    out = lambda_ssi * loss_ssi(d_pred, d_gt)
    if lambda_gm > 0:
        out = out + lambda_gm * loss_gm(d_pred, d_gt, scales=scales)
    return out


def loss_bce(mask_logits: Tensor, mask: Tensor) -> Tensor:
    """Mean per-pixel binary cross-entropy, evaluated in logit space."""
    if mask_logits.shape != mask.shape:
        raise ShapeError(f"mask shapes differ: {mask_logits.shape} vs {mask.shape}")
    return T.bce_with_logits(mask_logits, mask.detach() if isinstance(mask, Tensor) else mask).mean()


def loss_dice(mask_logits: Tensor, mask: Tensor) -> Tensor:
    """Soft Dice loss, 1 - (2*sum(p*M) + s) / (sum(p) + sum(M) + s).

    Computed per mask and averaged over the batch; always in [0, 1].
    """
    logits, _ = _as_batch(mask_logits)
    target, _ = _as_batch(mask)
    if logits.shape != target.shape:
        raise ShapeError(f"mask shapes differ: {mask_logits.shape} vs {mask.shape}")
    p = T.sigmoid(logits)
    inter = (p * target).sum(axis=(1, 2))
    denom = p.sum(axis=(1, 2)) + target.sum(axis=(1, 2))
    dice = (2.0 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH)
    return (1.0 - dice).mean()


def _check_binary(mask) -> None:
    data = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    if not np.all((data == 0) | (data == 1)):
        raise ValueError("ground-truth mask must be binary")


def loss_seg(mask_logits: Tensor, mask: Tensor, lambda_bce: float = 2.0,
             lambda_dice: float = 0.5) -> Tensor:
    """Segmentation objective: lambda_bce * BCE + lambda_dice * Dice."""
    if lambda_bce < 0 or lambda_dice < 0:
        raise ConfigError("losses.lambda_bce", "segmentation loss weights must be >= 0")
    _check_binary(mask)
    return lambda_bce * loss_bce(mask_logits, mask) + lambda_dice * loss_dice(mask_logits, mask)


def loss_all(l_cap: Tensor | float, l_depth: Tensor | float, l_seg: Tensor | float,
             weights: LossWeights) -> Tensor:
    """Combined objective: sum of task losses scaled by their task weights."""
    weights.validate()
    out = weights.lambda_cap * _scalar(l_cap)
    out = out + weights.lambda_depth * _scalar(l_depth)
    return out + weights.lambda_seg * _scalar(l_seg)


def _scalar(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(float(x))
