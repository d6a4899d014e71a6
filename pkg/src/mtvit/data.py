"""Procedural scene generator with analytic labels for all three tasks.

Scenes are 1-4 flat colored shapes (square / circle / triangle) on a
gray vertical background ramp, each shape sitting on its own constant
depth plane. The renderer, depth oracle, instance masks, referring
phrases and caption all derive from the same scene record, so labels
are mutually consistent by construction and depth carries zero label
noise: nearer surfaces have strictly smaller stored values, overlaps
resolve to the nearest plane, and the background ramp is always the
farthest surface.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_tensors, save_tensors
from .errors import DatasetError
from .rng import derive_seed, stream

COLORS = OrderedDict([
    ("red", (0.85, 0.10, 0.10)),
    ("green", (0.10, 0.70, 0.15)),
    ("blue", (0.15, 0.25, 0.85)),
    ("yellow", (0.90, 0.85, 0.10)),
    ("purple", (0.55, 0.15, 0.75)),
    ("cyan", (0.10, 0.75, 0.80)),
])
SHAPES = ("square", "circle", "triangle")

VOCAB = ["<pad>", "<bos>", "the", "and", "left", "right"] + list(COLORS) + list(SHAPES)
TOKEN_ID = {tok: i for i, tok in enumerate(VOCAB)}

MAX_OBJECTS = 4
MIN_VISIBLE_FRACTION = 0.004  # of the canvas, per object
_SPLIT_OFFSETS = {"train": 0, "val": 1 << 40, "test": 2 << 40,
                  "probe-train": 3 << 40, "probe-val": 4 << 40}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: float
    cy: float
    size: float
    plane: float  # constant depth of the object's surface; smaller is nearer


@dataclass(frozen=True)
class Scene:
    side: int
    objects: tuple[SceneObject, ...]
    bg_depth: tuple[float, float]  # ramp endpoints top -> bottom
    bg_gray: tuple[float, float]


@dataclass
class ImageSample:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W)
    instances: list[tuple[np.ndarray, list[int]]]  # (binary mask, phrase ids)
    caption: list[int]  # t_0 (= <bos>) plus supervised tokens
    scene: Scene = field(repr=False, default=None)


def class_id(color: str, shape: str) -> int:
    """Dense per-pixel class for probing: 0 is background."""
    return 1 + list(COLORS).index(color) * len(SHAPES) + SHAPES.index(shape)


def num_classes() -> int:
    return 1 + len(COLORS) * len(SHAPES)


def _membership(obj: SceneObject, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
    dx, dy = xx - obj.cx, yy - obj.cy
    half = obj.size / 2.0
    if obj.shape == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if obj.shape == "circle":
        return dx * dx + dy * dy <= half * half
    # upward triangle: apex at the top, width grows linearly downward
    return (dy >= -half) & (dy <= half) & (np.abs(dx) <= (dy + half) / 2.0)


def _background_depth(scene: Scene) -> np.ndarray:
    top, bottom = scene.bg_depth
    ramp = np.linspace(top, bottom, scene.side)
    return np.repeat(ramp[:, None], scene.side, axis=1)


def _draw_scene(gen: np.random.Generator, side: int, min_size: float, max_size: float,
                max_objects: int) -> Scene:
    n = int(gen.integers(1, max_objects + 1))
    combos: list[tuple[str, str]] = []
    objects = []
    planes: list[float] = []
    for _ in range(n):
        while True:
            shape = SHAPES[int(gen.integers(len(SHAPES)))]
            color = list(COLORS)[int(gen.integers(len(COLORS)))]
            if combos.count((color, shape)) < 2:
                combos.append((color, shape))
                break
        size = float(gen.uniform(min_size, max_size)) * side
        margin = size / 2.0 + 1.0
        cx = float(gen.uniform(margin, side - margin))
        cy = float(gen.uniform(margin, side - margin))
        while True:
            plane = float(gen.uniform(0.15, 0.60))
            if all(abs(plane - p) > 0.02 for p in planes):
                planes.append(plane)
                break
        objects.append(SceneObject(shape, color, cx, cy, size, plane))
    bg_depth = (float(gen.uniform(0.70, 0.80)), float(gen.uniform(0.85, 0.95)))
    bg_gray = (float(gen.uniform(0.12, 0.25)), float(gen.uniform(0.28, 0.42)))
    return Scene(side=side, objects=tuple(objects), bg_depth=bg_depth, bg_gray=bg_gray)


def _render(scene: Scene) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (image, depth, owner) where owner[y, x] is the index of the
    nearest covering object or -1 for background."""
    side = scene.side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    depth = _background_depth(scene)
    owner = np.full((side, side), -1, dtype=np.int64)
    for i, obj in enumerate(scene.objects):
        inside = _membership(obj, yy, xx)
        nearer = inside & (obj.plane < depth)
        depth[nearer] = obj.plane
        owner[nearer] = i
    gray = np.linspace(scene.bg_gray[0], scene.bg_gray[1], side)
    image = np.repeat(gray[:, None], side, axis=1)[..., None] * np.ones(3)
    for i, obj in enumerate(scene.objects):
        image[owner == i] = COLORS[obj.color]
    return image, depth, owner


def _phrases(scene: Scene) -> list[list[int]]:
    """Referring phrase per object; a left/right qualifier disambiguates
    objects sharing both color and shape."""
    out = []
    for i, obj in enumerate(scene.objects):
        twins = [j for j, o in enumerate(scene.objects)
                 if (o.color, o.shape) == (obj.color, obj.shape)]
        words = ["the"]
        if len(twins) > 1:
            leftmost = min(twins, key=lambda j: (scene.objects[j].cx, scene.objects[j].cy, j))
            words.append("left" if i == leftmost else "right")
        words += [obj.color, obj.shape]
        out.append([TOKEN_ID[w] for w in words])
    return out


def _caption(scene: Scene) -> list[int]:
    """<bos> then 'color shape' pairs in left-to-right order, joined by 'and'."""
    order = sorted(range(len(scene.objects)),
                   key=lambda i: (scene.objects[i].cx, scene.objects[i].cy, i))
    tokens = [TOKEN_ID["<bos>"]]
    for rank, i in enumerate(order):
        if rank:
            tokens.append(TOKEN_ID["and"])
        tokens += [TOKEN_ID[scene.objects[i].color], TOKEN_ID[scene.objects[i].shape]]
    return tokens


def parse_caption(tokens) -> list[tuple[str, str]]:
    """Invert a caption back into its (color, shape) pairs."""
    words = [VOCAB[int(t)] for t in tokens if int(t) != TOKEN_ID["<bos>"]]
    pairs = []
    for chunk in " ".join(words).split(" and "):
        color, shape = chunk.split(" ")
        pairs.append((color, shape))
    return pairs


def gen_scene(seed: int, side: int = 32, min_size: float = 0.20, max_size: float = 0.35,
              max_objects: int = MAX_OBJECTS) -> ImageSample:
    """Deterministic sample: every label derives from one scene record.

    Scenes where an object is almost fully occluded are redrawn from the
    same stream so every instance keeps a usable mask. The size range and
    object count are adjustable for easier or harder geometry.
    """
    gen = stream(seed, "scene")
    min_pixels = max(4, int(MIN_VISIBLE_FRACTION * side * side))
    while True:
        scene = _draw_scene(gen, side, min_size, max_size, max_objects)
        image, depth, owner = _render(scene)
        visible = [(owner == i).sum() for i in range(len(scene.objects))]
        if all(v >= min_pixels for v in visible):
            break
    masks = [(owner == i) for i in range(len(scene.objects))]
    instances = [(m.astype(np.float64), p) for m, p in zip(masks, _phrases(scene))]
    return ImageSample(image=image, depth=depth, instances=instances,
                       caption=_caption(scene), scene=scene)


def sample_seed(dataset_seed: int, split: str, index: int) -> int:
    """Disjoint integer seed ranges per split: no scene collisions."""
    if split not in _SPLIT_OFFSETS:
        raise DatasetError(f"unknown split {split!r}; expected one of {sorted(_SPLIT_OFFSETS)}")
    return derive_seed(dataset_seed, "samples") + _SPLIT_OFFSETS[split] + index


def _sample_tensors(sample: ImageSample) -> "OrderedDict[str, np.ndarray]":
    tensors: OrderedDict[str, np.ndarray] = OrderedDict()
    tensors["image"] = sample.image
    tensors["depth"] = sample.depth
    tensors["caption"] = np.asarray(sample.caption, dtype=np.float64)
    for i, (mask, phrase) in enumerate(sample.instances):
        tensors[f"mask/{i}"] = mask
        tensors[f"phrase/{i}"] = np.asarray(phrase, dtype=np.float64)
    return tensors


def gen_dataset(out_dir, n: int, seed: int, split: str, side: int = 32) -> Path:
    """Write n samples, the vocabulary, and a manifest.

    Workers are controlled by MTVIT_GEN_THREADS; per-sample seeding makes
    the output independent of scheduling.
    """
    if n < 1:
        raise DatasetError("dataset size must be >= 1")
    out = Path(out_dir)
    try:
        (out / "samples").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create dataset directory {out}: {exc}") from exc

    def build(i: int) -> None:
        sample = gen_scene(sample_seed(seed, split, i), side=side)
        save_tensors(out / "samples" / f"{i:06d}.bin", _sample_tensors(sample))

    workers = int(os.environ.get("MTVIT_GEN_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(build, range(n)))
    else:
        for i in range(n):
            build(i)

    (out / "vocab.txt").write_text("".join(f"{tok}\n" for tok in VOCAB))
    lines = [f"{i:06d} samples/{i:06d}.bin cap,depth,seg\n" for i in range(n)]
    (out / "manifest.txt").write_text("".join(lines))
    return out


class Dataset:
    """In-memory view of a generated dataset directory."""

    def __init__(self, root):
        root = Path(root)
        manifest = root / "manifest.txt"
        if not manifest.exists():
            raise DatasetError(f"no dataset at {root} (missing manifest.txt)")
        self.root = root
        self.vocab = (root / "vocab.txt").read_text().splitlines()
        self.samples: list[ImageSample] = []
        for line in manifest.read_text().splitlines():
            sample_id, rel, tasks = line.split(" ")
            tensors = load_tensors(root / rel)
            instances = []
            for i in range(len([k for k in tensors if k.startswith("mask/")])):
                instances.append((tensors[f"mask/{i}"].astype(np.float64),
                                  [int(t) for t in tensors[f"phrase/{i}"]]))
            self.samples.append(ImageSample(
                image=tensors["image"].astype(np.float64),
                depth=tensors["depth"].astype(np.float64),
                instances=instances,
                caption=[int(t) for t in tensors["caption"]],
            ))
        if not self.samples:
            raise DatasetError(f"dataset at {root} is empty")
        self.side = self.samples[0].image.shape[0]

    @classmethod
    def from_samples(cls, samples, root="<memory>") -> "Dataset":
        ds = cls.__new__(cls)
        ds.root = Path(root)
        ds.vocab = list(VOCAB)
        ds.samples = list(samples)
        if not ds.samples:
            raise DatasetError("no samples given")
        ds.side = ds.samples[0].image.shape[0]
        return ds

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int) -> ImageSample:
        return self.samples[i]
