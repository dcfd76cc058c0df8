"""Scenes, patch tiling with annotation vectors, stratified splits, and the
synthetic shape generator used as the desk-scale data source.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from . import boxes as boxutil
from .errors import (
    ConfigError,
    GeometryError,
    InvalidBoxError,
    ManifestError,
    StratificationError,
)

BACKGROUND_CLASS = 0


@dataclass(frozen=True)
class AnnotationVector:
    """Per-patch supervision: class identity, normalized area, squareness.

    Background patches use the full-extent box convention, which pins them
    to (class 0, area 1, squareness 1).
    """

    class_index: int
    area_norm: float
    squareness: float
    is_background: bool

    def as_array(self) -> np.ndarray:
        return np.array([self.class_index, self.area_norm, self.squareness], dtype=np.float64)


BACKGROUND_ANNOTATION = AnnotationVector(BACKGROUND_CLASS, 1.0, 1.0, True)


@dataclass
class Scene:
    """A full image with ground-truth boxes and labels."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    boxes: np.ndarray  # (N, 4) float32, (x_min, y_min, x_max, y_max) pixels
    labels: np.ndarray  # (N,) int64, class indices >= 1
    scene_id: str

    @property
    def height(self) -> int:
        return self.image.shape[1]

    @property
    def width(self) -> int:
        return self.image.shape[2]

    def validate(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ManifestError(f"scene {self.scene_id}: image must be (3, H, W), got {self.image.shape}")
        if len(self.boxes) != len(self.labels):
            raise ManifestError(f"scene {self.scene_id}: {len(self.boxes)} boxes vs {len(self.labels)} labels")
        for i, box in enumerate(np.asarray(self.boxes).reshape(-1, 4)):
            try:
                boxutil.validate_box(box, context=f"scene {self.scene_id}, box {i}")
            except InvalidBoxError as err:
                raise ManifestError(str(err)) from err
            x0, y0, x1, y1 = box
            if x0 < 0 or y0 < 0 or x1 > self.width or y1 > self.height:
                raise ManifestError(f"scene {self.scene_id}: box {i} {box.tolist()} outside image {self.width}x{self.height}")


@dataclass(frozen=True)
class Patch:
    """A single-object or background crop with its annotation vector."""

    pixels: np.ndarray  # (3, S, S) float32
    annotation: AnnotationVector
    source_scene_id: str
    origin: tuple[int, int]  # (x, y) offset in the source scene
    box: tuple[float, float, float, float] | None = None  # object box in patch coords


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def validate(self) -> None:
        if len(self.ratios) != 3:
            raise ConfigError(f"expected 3 split ratios, got {self.ratios!r}")
        if any(r <= 0 for r in self.ratios):
            raise ConfigError(f"split ratios must all be > 0, got {self.ratios!r}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must sum to 1, got {self.ratios!r}")


def compute_annotation(box, label: int, patch_side: int) -> AnnotationVector:
    """Annotation vector for an object box inside a patch.

    area_norm is the box area over the patch area; squareness is
    min(w, h) / max(w, h), symmetric under swapping width and height.
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    w, h = x1 - x0, y1 - y0
    if w <= 0 or h <= 0:
        raise InvalidBoxError(f"box {box!r} has non-positive extent")
    if w > patch_side or h > patch_side:
        raise InvalidBoxError(f"box {box!r} exceeds patch side {patch_side}")
    if int(label) < 1:
        raise InvalidBoxError(f"object label must be >= 1, got {label}")
    return AnnotationVector(
        class_index=int(label),
        area_norm=(w * h) / float(patch_side * patch_side),
        squareness=min(w, h) / max(w, h),
        is_background=False,
    )


def _window_overlaps(scene_boxes: np.ndarray, window_box: np.ndarray) -> np.ndarray:
    if len(scene_boxes) == 0:
        return np.zeros(0)
    return boxutil.iou_matrix(scene_boxes, window_box[None, :])[:, 0]


def tile_scene(
    scene: Scene,
    patch_side: int,
    background_iou_max: float = 0.05,
    stride: int | None = None,
) -> list[Patch]:
    """Tile a scene into single-object and background patches.

    Candidate windows are enumerated on a regular stride (default
    patch_side // 2). A window becomes an object patch when exactly one
    ground-truth box lies fully inside it and every other box overlaps the
    window at IoU <= background_iou_max; it becomes a background patch when
    no box exceeds that overlap. All other windows are skipped.
    """
    if patch_side > min(scene.height, scene.width):
        raise GeometryError(f"patch_side {patch_side} exceeds scene {scene.width}x{scene.height}")
    if stride is None:
        stride = max(1, patch_side // 2)
    patches: list[Patch] = []
    scene_boxes = np.asarray(scene.boxes, dtype=np.float64).reshape(-1, 4)
    for y in range(0, scene.height - patch_side + 1, stride):
        for x in range(0, scene.width - patch_side + 1, stride):
            window = np.array([x, y, x + patch_side, y + patch_side], dtype=np.float64)
            overlaps = _window_overlaps(scene_boxes, window)
            inside = (
                (scene_boxes[:, 0] >= x)
                & (scene_boxes[:, 1] >= y)
                & (scene_boxes[:, 2] <= x + patch_side)
                & (scene_boxes[:, 3] <= y + patch_side)
            ) if len(scene_boxes) else np.zeros(0, dtype=bool)
            pixels = scene.image[:, y:y + patch_side, x:x + patch_side]
            if inside.sum() == 1:
                idx = int(np.flatnonzero(inside)[0])
                others = np.ones(len(scene_boxes), dtype=bool)
                others[idx] = False
                if np.any(overlaps[others] > background_iou_max):
                    continue
                local = scene_boxes[idx] - np.array([x, y, x, y])
                ann = compute_annotation(local, int(scene.labels[idx]), patch_side)
                patches.append(Patch(pixels.copy(), ann, scene.scene_id, (x, y), tuple(local.tolist())))
            elif inside.sum() == 0 and not np.any(overlaps > background_iou_max):
                patches.append(Patch(pixels.copy(), BACKGROUND_ANNOTATION, scene.scene_id, (x, y)))
    return patches


def _allocate_counts(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder allocation with at least one item per split."""
    exact = [n * r for r in ratios]
    counts = [int(math.floor(e)) for e in exact]
    remainders = [e - c for e, c in zip(exact, counts)]
    while sum(counts) < n:
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    for i in range(len(counts)):
        while counts[i] == 0:
            j = int(np.argmax(counts))
            counts[j] -= 1
            counts[i] += 1
    return counts


def stratified_split(items: Sequence, spec: SplitSpec, key: Callable | None = None) -> tuple[list, list, list]:
    """Deterministic per-class stratified split into (train, val, test).

    Per-class counts follow the ratios via largest-remainder rounding, so
    each split's class count deviates from the exact ratio by at most one
    item. Every class must have at least as many items as there are splits.
    """
    spec.validate()
    if key is None:
        key = lambda item: item.class_index
    by_class: dict = {}
    for item in items:
        by_class.setdefault(key(item), []).append(item)
    rng = np.random.default_rng(spec.seed)
    splits: tuple[list, list, list] = ([], [], [])
    for cls in sorted(by_class):
        members = by_class[cls]
        if len(members) < 3:
            raise StratificationError(f"class {cls!r} has {len(members)} items; need >= 3 (one per split)")
        order = rng.permutation(len(members))
        counts = _allocate_counts(len(members), spec.ratios)
        start = 0
        for split, count in zip(splits, counts):
            split.extend(members[i] for i in order[start:start + count])
            start += count
    return splits


_PALETTE = [
    (0.85, 0.25, 0.20),
    (0.20, 0.55, 0.85),
    (0.92, 0.78, 0.22),
    (0.55, 0.32, 0.72),
    (0.30, 0.75, 0.42),
    (0.85, 0.50, 0.25),
]


@dataclass
class SceneGeneratorConfig:
    """Synthetic shape-scene generator settings."""

    n_scenes: int = 200
    image_size: int = 128
    n_classes: int = 3
    objects_min: int = 1
    objects_max: int = 3
    size_min: int = 20
    size_max: int = 48
    noise: float = 0.02

    def validate(self) -> None:
        if self.size_max > self.image_size:
            raise ConfigError(f"object size_max {self.size_max} exceeds image_size {self.image_size}")
        if self.size_min <= 1 or self.size_min > self.size_max:
            raise ConfigError(f"invalid size range [{self.size_min}, {self.size_max}]")
        if self.objects_min < 0 or self.objects_min > self.objects_max:
            raise ConfigError(f"invalid objects range [{self.objects_min}, {self.objects_max}]")
        if not (1 <= self.n_classes <= len(_PALETTE)):
            raise ConfigError(f"n_classes must be in [1, {len(_PALETTE)}], got {self.n_classes}")


def _shape_mask(kind: str, w: int, h: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    if kind == "rect":
        return np.ones((h, w), dtype=bool)
    if kind == "ellipse":
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        return ((xx - cx) / (w / 2.0)) ** 2 + ((yy - cy) / (h / 2.0)) ** 2 <= 1.0
    if kind == "triangle":
        # apex at top-center, base along the bottom edge
        frac = np.where(h > 1, yy / max(h - 1, 1), 1.0)
        half = (w - 1) / 2.0
        return np.abs(xx - half) <= half * frac + 0.5
    raise ValueError(f"unknown shape kind {kind!r}")


_SHAPES = ("rect", "ellipse", "triangle")


def generate_synthetic_scenes(config: SceneGeneratorConfig, seed: int) -> list[Scene]:
    """Render deterministic scenes of colored shapes on a noisy background.

    Class k (1-based) maps to shape _SHAPES[(k-1) % 3] with palette color
    k-1, so classes stay visually distinct. Object boxes are the exact
    placed extents; placements are rejection-sampled to keep pairwise IoU
    below 0.05.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    scenes = []
    size = config.image_size
    for idx in range(config.n_scenes):
        base = 0.35 + 0.05 * rng.standard_normal()
        image = np.full((3, size, size), base, dtype=np.float64)
        image += 0.05 * np.linspace(-1, 1, size)[None, :, None]
        image += rng.normal(scale=config.noise, size=image.shape)
        n_objects = int(rng.integers(config.objects_min, config.objects_max + 1))
        placed: list[np.ndarray] = []
        labels: list[int] = []
        for _ in range(n_objects):
            for _attempt in range(50):
                w = int(rng.integers(config.size_min, config.size_max + 1))
                h = int(rng.integers(config.size_min, config.size_max + 1))
                x0 = int(rng.integers(0, size - w + 1))
                y0 = int(rng.integers(0, size - h + 1))
                box = np.array([x0, y0, x0 + w, y0 + h], dtype=np.float64)
                if placed and boxutil.iou_matrix(np.stack(placed), box[None]).max() > 0.05:
                    continue
                label = int(rng.integers(1, config.n_classes + 1))
                color = np.array(_PALETTE[label - 1]) * (1.0 + rng.uniform(-0.08, 0.08))
                mask = _shape_mask(_SHAPES[(label - 1) % len(_SHAPES)], w, h)
                region = image[:, y0:y0 + h, x0:x0 + w]
                region[:, mask] = color[:, None]
                placed.append(box)
                labels.append(label)
                break
        boxes = np.stack(placed).astype(np.float32) if placed else np.zeros((0, 4), dtype=np.float32)
        scene = Scene(
            image=np.clip(image, 0.0, 1.0).astype(np.float32),
            boxes=boxes,
            labels=np.asarray(labels, dtype=np.int64),
            scene_id=f"synth_{seed}_{idx:04d}",
        )
        scene.validate()
        scenes.append(scene)
    return scenes


def save_manifest(scenes: Iterable[Scene], path: str | Path) -> Path:
    """Write scenes as a JSON manifest plus PNG images next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image_dir = path.parent / "images"
    image_dir.mkdir(exist_ok=True)
    records = []
    for scene in scenes:
        scene.validate()
        rel = f"images/{scene.scene_id}.png"
        array = (np.clip(scene.image, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(array).save(path.parent / rel)
        records.append(
            {
                "id": scene.scene_id,
                "image": rel,
                "width": scene.width,
                "height": scene.height,
                "boxes": [
                    {
                        "x_min": float(b[0]),
                        "y_min": float(b[1]),
                        "x_max": float(b[2]),
                        "y_max": float(b[3]),
                        "label": int(label),
                    }
                    for b, label in zip(np.asarray(scene.boxes).reshape(-1, 4), scene.labels)
                ],
            }
        )
    with open(path, "w") as fh:
        json.dump({"scenes": records}, fh, indent=2, sort_keys=True)
    return path


def load_manifest(path: str | Path) -> list[Scene]:
    """Load scenes from a manifest; validates every box and names offenders."""
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: invalid JSON at line {err.lineno}, column {err.colno}: {err.msg}") from err
    if not isinstance(doc, dict) or "scenes" not in doc:
        raise ManifestError(f"{path}: top-level object must contain a 'scenes' list")
    scenes = []
    for i, rec in enumerate(doc["scenes"]):
        sid = rec.get("id", f"<scene #{i}>")
        for field_name in ("id", "image", "width", "height", "boxes"):
            if field_name not in rec:
                raise ManifestError(f"{path}: scene {sid}: missing field '{field_name}'")
        image_path = path.parent / rec["image"]
        if not image_path.exists():
            raise ManifestError(f"{path}: scene {sid}: image file {rec['image']!r} not found")
        with Image.open(image_path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
        boxes, labels = [], []
        for j, box in enumerate(rec["boxes"]):
            for field_name in ("x_min", "y_min", "x_max", "y_max", "label"):
                if field_name not in box:
                    raise ManifestError(f"{path}: scene {sid}: box {j}: missing field '{field_name}'")
            boxes.append([box["x_min"], box["y_min"], box["x_max"], box["y_max"]])
            labels.append(int(box["label"]))
        scene = Scene(
            image=array.transpose(2, 0, 1),
            boxes=np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
            labels=np.asarray(labels, dtype=np.int64),
            scene_id=str(rec["id"]),
        )
        if scene.width != rec["width"] or scene.height != rec["height"]:
            raise ManifestError(
                f"{path}: scene {sid}: declared size {rec['width']}x{rec['height']} "
                f"does not match image {scene.width}x{scene.height}"
            )
        scene.validate()
        scenes.append(scene)
    return scenes
