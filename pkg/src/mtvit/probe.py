"""Frozen-backbone linear probing and the shared metric implementations.

Probes fit a linear predictor per final-layer patch token (softmax
regression for segmentation, closed-form ridge for depth); predictions
are bilinearly upsampled to pixel resolution for scoring. The backbone
is read-only throughout. Depth metrics follow the relative-depth
protocol: predictions are least-squares scale-and-shift aligned to the
ground truth over valid pixels before RMSE / AbsRel / delta1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import VisionBackbone
from .data import Dataset, ImageSample, class_id, VOCAB
from .errors import ConfigError, EvaluationError, ShapeError
from .tensor import Tensor


@dataclass
class LinearProbe:
    weight: np.ndarray  # (D, C) for segmentation, (D, 1) for depth
    bias: np.ndarray
    kind: str


@dataclass(frozen=True)
class ProbeConfig:
    steps: int = 200
    lr: float = 0.1
    ridge: float = 1e-3

    def validate(self, key_prefix: str = "probe") -> None:
        if self.steps < 1:
            raise ConfigError(f"{key_prefix}.steps", "must be >= 1")
        if self.lr <= 0:
            raise ConfigError(f"{key_prefix}.lr", "must be > 0")
        if self.ridge < 0:
            raise ConfigError(f"{key_prefix}.ridge", "must be >= 0")


@dataclass
class MetricReport:
    task: str
    metric: str
    value: float
    dataset_id: str
    sample_count: int

    def line(self) -> str:
        return (f"task={self.task} metric={self.metric} value={self.value:.10g} "
                f"dataset={self.dataset_id} samples={self.sample_count}")


# -- label construction -----------------------------------------------------------


def pixel_class_map(sample: ImageSample) -> np.ndarray:
    """Per-pixel class ids: 0 background, else the (color, shape) class.

    Colors and shapes are recovered from the trailing tokens of each
    instance's referring phrase.
    """
    cm = np.zeros(sample.depth.shape, dtype=np.int64)
    for mask, phrase in sample.instances:
        color, shape = VOCAB[phrase[-2]], VOCAB[phrase[-1]]
        cm[mask.astype(bool)] = class_id(color, shape)
    return cm


def _patch_mode(class_map: np.ndarray, patch: int, num_classes: int) -> np.ndarray:
    """Majority class per patch (ties go to the lowest class id)."""
    side = class_map.shape[0]
    g = side // patch
    patches = class_map.reshape(g, patch, g, patch).transpose(0, 2, 1, 3).reshape(g * g, -1)
    counts = (patches[:, :, None] == np.arange(num_classes)).sum(axis=1)
    return counts.argmax(axis=1)


def _patch_mean(depth: np.ndarray, patch: int) -> np.ndarray:
    side = depth.shape[0]
    g = side // patch
    return depth.reshape(g, patch, g, patch).mean(axis=(1, 3)).reshape(-1)


def extract_features(backbone: VisionBackbone, dataset: Dataset,
                     chunk: int = 64) -> np.ndarray:
    """Final-layer token features, (num_samples, tokens, D), no autodiff."""
    feats = []
    with T.no_grad():
        for start in range(0, len(dataset), chunk):
            images = np.stack([dataset[i].image for i in
                               range(start, min(start + chunk, len(dataset)))])
            feats.append(backbone.forward_features(Tensor(images))[-1].data)
    return np.concatenate(feats, axis=0)


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd < 1e-8, 1.0, sd)
    return (x - mu) / sd, mu, sd


def _fold_standardization(w: np.ndarray, b: np.ndarray, mu: np.ndarray,
                          sd: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w_raw = w / sd[:, None]
    b_raw = b - mu @ w_raw
    return w_raw, b_raw


# -- probe fitting ------------------------------------------------------------------


def fit_probe_seg(backbone: VisionBackbone, dataset: Dataset, num_classes: int,
                  config: ProbeConfig = ProbeConfig(), label_fn=pixel_class_map) -> LinearProbe:
    """Softmax regression on patch tokens with a fixed step budget.

    The backbone receives no updates; only the probe's weight and bias
    are fitted. ``label_fn`` maps a sample to its per-pixel class map.
    """
    if num_classes < 2:
        raise ConfigError("probe.num_classes", "need at least two classes")
    config.validate()
    patch = backbone.config.patch_size
    x = extract_features(backbone, dataset)
    n_samples, tokens, d = x.shape
    x = x.reshape(-1, d)
    y = np.concatenate([_patch_mode(label_fn(dataset[i]), patch, num_classes)
                        for i in range(n_samples)])
    xs, mu, sd = _standardize(x)
    onehot = np.zeros((y.size, num_classes))
    onehot[np.arange(y.size), y] = 1.0
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    n = float(y.size)
    for _ in range(config.steps):
        logits = xs @ w + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        delta = (p - onehot) / n
        w -= config.lr * (xs.T @ delta)
        b -= config.lr * delta.sum(axis=0)
    w, b = _fold_standardization(w, b, mu, sd)
    return LinearProbe(weight=w, bias=b, kind="seg")


def fit_probe_depth(backbone: VisionBackbone, dataset: Dataset,
                    config: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """Closed-form ridge regression from patch tokens to patch-mean depth."""
    config.validate()
    patch = backbone.config.patch_size
    x = extract_features(backbone, dataset)
    n_samples, tokens, d = x.shape
    x = x.reshape(-1, d)
    y = np.concatenate([_patch_mean(dataset[i].depth, patch) for i in range(n_samples)])
    xs, mu, sd = _standardize(x)
    reg = config.ridge * xs.shape[0]
    w = np.linalg.solve(xs.T @ xs + reg * np.eye(d), xs.T @ y)[:, None]
    b = np.array([y.mean() - (xs.mean(axis=0) @ w)[0]])
    w, b = _fold_standardization(w, b, mu, sd)
    return LinearProbe(weight=w, bias=b, kind="depth")


def _probe_logit_maps(backbone: VisionBackbone, probe: LinearProbe,
                      dataset: Dataset, chunk: int = 64):
    """Upsampled per-pixel probe outputs, one (H, W, C) map per sample."""
    side = dataset.side
    patch = backbone.config.patch_size
    g = side // patch
    with T.no_grad():
        for start in range(0, len(dataset), chunk):
            idx = range(start, min(start + chunk, len(dataset)))
            images = np.stack([dataset[i].image for i in idx])
            feats = backbone.forward_features(Tensor(images))[-1].data
            logits = feats @ probe.weight + probe.bias  # (B, T, C)
            grids = logits.reshape(-1, g, g, logits.shape[-1]).transpose(0, 3, 1, 2)
            up = T.bilinear_resize(Tensor(grids), side, side).data.transpose(0, 2, 3, 1)
            for j, i in enumerate(idx):
                yield i, up[j]


# -- metrics -------------------------------------------------------------------------


def seg_metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> dict:
    """Per-class IoU and their mean; classes absent from both are skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    inter, union = _iou_counts(pred, gt, num_classes)
    return _iou_from_counts(inter, union)


def _iou_counts(pred, gt, num_classes):
    if pred.min() < 0 or pred.max() >= num_classes or gt.min() < 0 or gt.max() >= num_classes:
        raise ShapeError(f"class ids must lie in [0, {num_classes})")
    inter = np.zeros(num_classes)
    union = np.zeros(num_classes)
    for c in range(num_classes):
        pc, gc = pred == c, gt == c
        inter[c] = (pc & gc).sum()
        union[c] = (pc | gc).sum()
    return inter, union


def _iou_from_counts(inter, union) -> dict:
    present = union > 0
    iou = np.full(union.shape, np.nan)
    iou[present] = inter[present] / union[present]
    return {"iou": iou, "miou": float(iou[present].mean())}


def align_scale_shift(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Least-squares fit of a*pred + b to gt over the mask, applied to pred."""
    p, g = pred[mask], gt[mask]
    a_mat = np.stack([p, np.ones_like(p)], axis=1)
    coeff, *_ = np.linalg.lstsq(a_mat, g, rcond=None)
    return coeff[0] * pred + coeff[1]


def depth_metrics(pred: np.ndarray, gt: np.ndarray, align: bool = True) -> dict:
    """RMSE, AbsRel, and delta1 under the relative-depth protocol.

    Pixels with gt <= 0 are excluded; with ``align`` the prediction is
    scale-and-shift fitted to the ground truth first. Ratio metrics
    clamp the aligned prediction away from zero.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    mask = gt > 0
    if not mask.any():
        raise EvaluationError("no valid pixels (gt > 0) to evaluate")
    if align:
        pred = align_scale_shift(pred, gt, mask)
    p, g = pred[mask], gt[mask]
    rmse = float(np.sqrt(((p - g) ** 2).mean()))
    p_safe = np.maximum(p, 1e-6)
    absrel = float((np.abs(p - g) / g).mean())
    ratio = np.maximum(p_safe / g, g / p_safe)
    delta1 = float((ratio < 1.25).mean())
    return {"rmse": rmse, "absrel": absrel, "delta1": delta1}


# -- dataset-level evaluation -----------------------------------------------------------


def evaluate_probe_seg(backbone: VisionBackbone, probe: LinearProbe, dataset: Dataset,
                       num_classes: int, dataset_id: str = "",
                       label_fn=pixel_class_map) -> MetricReport:
    """Dataset mIoU with intersections and unions pooled over samples."""
    inter = np.zeros(num_classes)
    union = np.zeros(num_classes)
    for i, logit_map in _probe_logit_maps(backbone, probe, dataset):
        pred = logit_map.argmax(axis=-1)
        gt = label_fn(dataset[i])
        di, du = _iou_counts(pred, gt, num_classes)
        inter += di
        union += du
    miou = _iou_from_counts(inter, union)["miou"]
    return MetricReport("seg", "miou", miou, dataset_id or str(dataset.root), len(dataset))


def evaluate_probe_depth(backbone: VisionBackbone, probe: LinearProbe, dataset: Dataset,
                         dataset_id: str = "") -> list[MetricReport]:
    """Mean per-sample RMSE / AbsRel / delta1 over the dataset."""
    sums = {"rmse": 0.0, "absrel": 0.0, "delta1": 0.0}
    for i, logit_map in _probe_logit_maps(backbone, probe, dataset):
        metrics = depth_metrics(logit_map[..., 0], dataset[i].depth)
        for k in sums:
            sums[k] += metrics[k]
    n = len(dataset)
    ds = dataset_id or str(dataset.root)
    return [MetricReport("depth", k, sums[k] / n, ds, n) for k in ("rmse", "absrel", "delta1")]
