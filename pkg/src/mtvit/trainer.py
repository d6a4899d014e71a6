"""Two-stage training orchestration.

Stage one warms up the vision projector on captions with everything
else frozen. Stage two alternates single-task batches (caption, depth,
segmentation) in a fixed order, accumulating the task-weighted
gradients and applying exactly one optimizer update per round, which
makes the round equivalent to a single update on the weighted summed
loss. Datasets of different sizes are resampled so every task sees the
same number of optimization steps per epoch.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from .backbone import select_uniform
from .data import Dataset
from .errors import ConfigError, DivergenceError
from .losses import LossWeights, loss_depth, loss_seg
from .model import GROUPS, MultiTaskModel
from .rng import stream
from .tensor import Tensor

TASKS = ("cap", "depth", "seg")
LOW_RATE_GROUPS = ("backbone", "projector", "decoder")
HIGH_RATE_GROUPS = ("depth_head", "seg_head")


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "multitask"
    tasks: tuple[str, ...] = TASKS
    epochs: int = 3
    batch_cap: int = 8
    batch_depth: int = 32
    batch_seg: int = 32
    lr_backbone: float = 3e-4
    lr_heads: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    init_checkpoint: str = ""
    trainable_groups: tuple[str, ...] = ()  # empty means stage default

    def validate(self, key_prefix: str = "train") -> None:
        if self.stage not in ("warmup", "multitask"):
            raise ConfigError(f"{key_prefix}.stage", f"unknown stage {self.stage!r}")
        if not self.tasks or any(t not in TASKS for t in self.tasks):
            raise ConfigError(f"{key_prefix}.tasks", f"tasks must be a subset of {TASKS}")
        if self.epochs < 0:
            raise ConfigError(f"{key_prefix}.epochs", "must be >= 0 (0 is a no-op stage)")
        for bname in ("batch_cap", "batch_depth", "batch_seg"):
            if getattr(self, bname) < 1:
                raise ConfigError(f"{key_prefix}.{bname}", "batch size must be >= 1")
        for lr in ("lr_backbone", "lr_heads"):
            if getattr(self, lr) <= 0:
                raise ConfigError(f"{key_prefix}.{lr}", "learning rate must be > 0")
        if self.optimizer not in ("adamw", "sgd"):
            raise ConfigError(f"{key_prefix}.optimizer", f"unknown optimizer {self.optimizer!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"{key_prefix}.weight_decay", "must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"{key_prefix}.precision", "expected float32 or float64")
        if any(g not in GROUPS for g in self.trainable_groups):
            raise ConfigError(f"{key_prefix}.trainable_groups", f"groups must be from {GROUPS}")
        if self.stage == "warmup" and self.trainable_groups not in ((), ("projector",)):
            raise ConfigError(f"{key_prefix}.trainable_groups",
                              "warm-up trains the projector exclusively")

    def batch_size(self, task: str) -> int:
        return {"cap": self.batch_cap, "depth": self.batch_depth, "seg": self.batch_seg}[task]


@dataclass
class TaskBatch:
    """A batch belonging to exactly one task."""

    task: str
    images: np.ndarray  # (B, H, W, 3)
    captions: list = field(default_factory=list)  # cap: token sequences
    depths: np.ndarray | None = None              # depth: (B, H, W) ground truth
    pairs: list = field(default_factory=list)     # seg: (image row, mask, phrase)


def make_batch(dataset: Dataset, task: str, indices, pair_rng=None) -> TaskBatch:
    """Assemble a single-task batch from dataset rows.

    For segmentation each (phrase, mask) pair is one training example;
    with ``pair_rng`` one pair is drawn per sampled image (images repeat
    across draws, so pairs still share cached features within a batch),
    otherwise every pair of every sampled image is used.
    """
    samples = [dataset[i] for i in indices]
    images = np.stack([s.image for s in samples])
    if task == "cap":
        return TaskBatch(task, images, captions=[s.caption for s in samples])
    if task == "depth":
        return TaskBatch(task, images, depths=np.stack([s.depth for s in samples]))
    if task == "seg":
        if pair_rng is None:
            pairs = [(row, mask, phrase)
                     for row, s in enumerate(samples)
                     for mask, phrase in s.instances]
        else:
            pairs = []
            for row, s in enumerate(samples):
                mask, phrase = s.instances[int(pair_rng.integers(len(s.instances)))]
                pairs.append((row, mask, phrase))
        return TaskBatch(task, images, pairs=pairs)
    raise ConfigError("train.tasks", f"unknown task {task!r}")


# -- optimizers ---------------------------------------------------------------


class SGD:
    """Stateless descent; params missing from the gradient map are untouched."""

    def __init__(self, groups: list[tuple[list, float]]):
        self.groups = groups

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for params, lr in self.groups:
            for name, p in params:
                g = grads.get(name)
                if g is not None:
                    p.data = p.data - lr * g


class AdamW:
    """Adaptive moments with decoupled weight decay.

    Moments update once per accumulated gradient, so an alternating
    round with accumulation matches a single update on the summed loss.
    """

    def __init__(self, groups: list[tuple[list, float]], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.groups = groups
        self.beta1, self.beta2, self.eps, self.wd = beta1, beta2, eps, weight_decay
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.beta1, self.beta2
        for params, lr in self.groups:
            for name, p in params:
                g = grads.get(name)
                if g is None:
                    continue
                m = self._m.get(name)
                if m is None:
                    m = np.zeros_like(p.data)
                    self._v[name] = np.zeros_like(p.data)
                    self._t[name] = 0
                v = self._v[name]
                t = self._t[name] + 1
                m = b1 * m + (1 - b1) * g
                v = b2 * v + (1 - b2) * (g * g)
                self._m[name], self._v[name], self._t[name] = m, v, t
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.wd * p.data)


def build_optimizer(model: MultiTaskModel, config: TrainConfig):
    if config.stage == "warmup":
        groups = [(model.group("projector"), config.lr_heads)]
    else:
        names = config.trainable_groups or GROUPS
        low = [p for g in names if g in LOW_RATE_GROUPS for p in model.group(g)]
        high = [p for g in names if g in HIGH_RATE_GROUPS for p in model.group(g)]
        groups = [(low, config.lr_backbone), (high, config.lr_heads)]
    if config.optimizer == "sgd":
        return SGD(groups)
    return AdamW(groups, config.beta1, config.beta2, config.eps, config.weight_decay)


# -- task losses ----------------------------------------------------------------


def task_loss(model: MultiTaskModel, batch: TaskBatch, weights: LossWeights) -> Tensor:
    """Unweighted mean loss of one single-task batch."""
    images = Tensor(batch.images)
    side = batch.images.shape[1]
    if batch.task == "cap":
        f_final = model.backbone.forward_features(images)[-1]
        return model.caption.caption_loss(model.caption.project(f_final), batch.captions)
    if batch.task == "depth":
        pyramid = model.backbone.forward_features(images)
        pred = model.depth.predict_depth(select_uniform(pyramid, k=3), side)
        return loss_depth(pred, Tensor(batch.depths), weights.lambda_ssi,
                          weights.lambda_gm, scales=weights.gm_scales)
    if batch.task == "seg":
        f_final = model.backbone.forward_features(images)[-1]
        rows = np.asarray([row for row, _, _ in batch.pairs], dtype=np.int64)
        feats = T.gather_rows(f_final, rows)  # pairs share their image's features
        prompts = model.seg_prompt.embed_prompt([phrase for _, _, phrase in batch.pairs])
        logits = model.seg.predict_mask(feats, prompts, image_side=side)
        masks = Tensor(np.stack([mask for _, mask, _ in batch.pairs]))
        return loss_seg(logits, masks, weights.lambda_bce, weights.lambda_dice)
    raise ConfigError("train.tasks", f"unknown task {batch.task!r}")


# -- scheduling -------------------------------------------------------------------


def resample_equalize(sizes: dict[str, int], batch_sizes: dict[str, int], seed: int,
                      epoch: int = 0) -> dict[str, list[np.ndarray]]:
    """Index batches giving every task the same number of steps.

    The step count is the largest ceil(n_task / B_task); smaller
    datasets repeat through fresh seeded shuffles per pass.
    """
    for task, n in sizes.items():
        if n < 1:
            raise ConfigError("data", f"dataset for task {task!r} is empty")
    steps = max(int(np.ceil(n / batch_sizes[t])) for t, n in sizes.items())
    out: dict[str, list[np.ndarray]] = {}
    for task, n in sizes.items():
        b = batch_sizes[task]
        need = steps * b
        order = []
        for rep in range(int(np.ceil(need / n))):
            order.append(stream(seed, f"shuffle/{task}/{epoch}", rep).permutation(n))
        flat = np.concatenate(order)[:need]
        out[task] = [flat[i * b : (i + 1) * b] for i in range(steps)]
    return out


# -- steps and stages ----------------------------------------------------------------


def multitask_step(model: MultiTaskModel, batches: dict[str, TaskBatch],
                   weights: LossWeights, optimizer) -> dict[str, float]:
    """One alternating round: per task, forward + weighted backward into a
    shared accumulator; a single optimizer update after all tasks."""
    task_weight = {"cap": weights.lambda_cap, "depth": weights.lambda_depth,
                   "seg": weights.lambda_seg}
    params = list(model.named_params())
    accum: dict[str, np.ndarray] = {}
    losses: dict[str, float] = {}
    for task in TASKS:
        if task not in batches:
            continue
        loss = task_loss(model, batches[task], weights)
        value = loss.item()
        losses[task] = value
        if not np.isfinite(value):
            raise DivergenceError(task, -1, value)
        grad_map = T.backward(task_weight[task] * loss)
        for name, p in params:
            g = grad_map.get(p)
            if g is None:
                continue
            acc = accum.get(name)
            accum[name] = g.copy() if acc is None else acc + g
    if not losses:
        raise ConfigError("train.tasks", "a round needs at least one task batch")
    optimizer.step(accum)
    return losses


@dataclass
class MetricRecord:
    step: int
    task: str
    loss: float
    wall: float

    def line(self) -> str:
        return f"step={self.step} task={self.task} loss={self.loss:.10g} wall={self.wall:.3f}"


def train(model: MultiTaskModel, config: TrainConfig, datasets: dict[str, Dataset],
          weights: LossWeights, log=None) -> list[MetricRecord]:
    """Run one stage over its datasets; returns per-step loss records.

    Warm-up uses the caption dataset only and updates just the
    projector; multitask updates the configured groups with their group
    learning rates. A non-finite loss aborts with a diagnostic record.
    """
    config.validate()
    weights.validate()
    tasks = ("cap",) if config.stage == "warmup" else tuple(t for t in TASKS if t in config.tasks)
    for t in tasks:
        if t not in datasets:
            raise ConfigError("data", f"no dataset provided for task {t!r}")
    optimizer = build_optimizer(model, config)
    records: list[MetricRecord] = []
    start = time.monotonic()
    step = 0
    # the model's matrices are small; BLAS thread fan-out costs more than it saves
    with T.using_dtype(config.precision), \
            threadpool_limits(limits=int(os.environ.get("MTVIT_BLAS_THREADS", "1"))):
        for epoch in range(config.epochs):
            plan = resample_equalize({t: len(datasets[t]) for t in tasks},
                                     {t: config.batch_size(t) for t in tasks},
                                     config.seed, epoch)
            for round_idx in range(len(plan[tasks[0]])):
                batches = {
                    t: make_batch(datasets[t], t, plan[t][round_idx],
                                  pair_rng=stream(config.seed, f"pairs/{epoch}", round_idx)
                                  if t == "seg" else None)
                    for t in tasks
                }
                step += 1
                try:
                    if config.stage == "warmup":
                        losses = _warmup_step(model, batches["cap"], optimizer, weights)
                    else:
                        losses = multitask_step(model, batches, weights, optimizer)
                except DivergenceError as err:
                    bad = MetricRecord(step, err.task, float("nan"), time.monotonic() - start)
                    records.append(bad)
                    if log is not None:
                        log(bad.line() + " diverged=1")
                    raise DivergenceError(err.task, step, float("nan")) from err
                wall = time.monotonic() - start
                for t, value in losses.items():
                    rec = MetricRecord(step, t, value, wall)
                    records.append(rec)
                    if log is not None:
                        log(rec.line())
    return records


def _warmup_step(model: MultiTaskModel, batch: TaskBatch, optimizer,
                 weights: LossWeights) -> dict[str, float]:
    # the backbone is frozen here, so its features are constants
    with T.no_grad():
        f_final = model.backbone.forward_features(Tensor(batch.images))[-1]
    loss = model.caption.caption_loss(model.caption.project(Tensor(f_final.data)),
                                      batch.captions)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError("cap", -1, value)
    grad_map = T.backward(loss)
    grads = {}
    for name, p in model.group("projector"):
        g = grad_map.get(p)
        if g is not None:
            grads[name] = g
    optimizer.step(grads)
    return {"cap": value}


def warmup_alignment(model: MultiTaskModel, config: TrainConfig, dataset: Dataset,
                     weights: LossWeights, log=None) -> list[MetricRecord]:
    """Caption alignment warm-up: only projector tensors change."""
    if config.stage != "warmup":
        config = replace(config, stage="warmup")
    return train(model, config, {"cap": dataset}, weights, log=log)


def epoch_means(records: list[MetricRecord], steps_per_epoch: int) -> dict[str, list[float]]:
    """Per-task mean loss per epoch, from the flat step records."""
    by_task: dict[str, list[float]] = {}
    for rec in records:
        by_task.setdefault(rec.task, []).append(rec.loss)
    out = {}
    for task, vals in by_task.items():
        arr = np.asarray(vals)
        out[task] = [float(c.mean()) for c in np.split(arr, len(arr) // steps_per_epoch)]
    return out
