"""A minimal two-stage detector: residual backbone + feature pyramid,
anchor-based region proposal network, RoIAlign, and class/box heads.

The pyramid it produces is the fusion substrate: training and inference
both route features through `augment_pyramid` when fusion is enabled, so
proposals and region-wise predictions consume the augmented maps.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import boxes as boxutil
from .dataset import Scene
from .errors import ConfigError, DegenerateInputError, GeometryError, ShapeError
from .fusion import FusionConfig, FusionParams, PyramidFeatures, augment_pyramid
from .latentgrid import LatentGrid

logger = logging.getLogger(__name__)

LEVEL_STRIDES = {"P2": 4, "P3": 8, "P4": 16, "P5": 32}


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int = 3
    channels: int = 64
    levels: tuple[str, ...] = ("P2", "P3", "P4", "P5")
    anchor_sizes: tuple[float, ...] = (16.0, 32.0, 64.0, 128.0)
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 64
    rpn_pos_frac: float = 0.5
    rpn_nms_iou: float = 0.7
    pre_nms_topk: int = 256
    proposals_train: int = 96
    proposals_test: int = 64
    roi_fg_iou: float = 0.5
    roi_bg_iou: float = 0.3
    roi_batch: int = 32
    roi_pos_frac: float = 0.25
    roi_output: int = 7
    head_hidden: int = 256
    canonical_size: float = 32.0
    canonical_level: int = 2
    smooth_l1_beta: float = 1.0
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 4
    seed: int = 0
    score_threshold: float = 0.5
    nms_iou: float = 0.5
    max_detections: int = 50

    def validate(self) -> None:
        if len(self.anchor_sizes) != len(self.levels):
            raise ConfigError("need one anchor size per pyramid level")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("invalid training schedule")


@dataclass(frozen=True)
class Proposal:
    box: np.ndarray
    objectness: float


@dataclass(frozen=True)
class Detection:
    box: np.ndarray
    class_index: int
    score: float


@dataclass
class AnchorSet:
    """Per-level anchor boxes in corner form, cell-major then ratio."""

    per_level: dict[str, np.ndarray]

    def counts(self) -> dict[str, int]:
        return {name: len(a) for name, a in self.per_level.items()}


def smooth_l1(x: torch.Tensor, beta: float = 1.0) -> torch.Tensor:
    """Elementwise smooth L1 with transition point beta (0.5*x^2/beta inside)."""
    absx = x.abs()
    return torch.where(absx < beta, 0.5 * x * x / beta, absx - 0.5 * beta)


def build_anchors(level_shapes: dict[str, tuple[int, int]], config: DetectorConfig) -> AnchorSet:
    """Anchors tiling each level at its stride; one size per level, all ratios."""
    per_level = {}
    for name, size in zip(config.levels, config.anchor_sizes):
        h, w = level_shapes[name]
        stride = LEVEL_STRIDES[name]
        cy = (np.arange(h) + 0.5) * stride
        cx = (np.arange(w) + 0.5) * stride
        ratios = np.asarray(config.aspect_ratios, dtype=np.float64)
        aw = size * np.sqrt(ratios)
        ah = size / np.sqrt(ratios)
        grid_cy, grid_cx = np.meshgrid(cy, cx, indexing="ij")
        centers = np.stack([grid_cx.ravel(), grid_cy.ravel()], axis=1)  # (H*W, 2)
        anchors = np.empty((h * w, len(ratios), 4), dtype=np.float64)
        anchors[:, :, 0] = centers[:, None, 0] - aw[None, :] / 2
        anchors[:, :, 1] = centers[:, None, 1] - ah[None, :] / 2
        anchors[:, :, 2] = centers[:, None, 0] + aw[None, :] / 2
        anchors[:, :, 3] = centers[:, None, 1] + ah[None, :] / 2
        per_level[name] = anchors.reshape(-1, 4)
    return AnchorSet(per_level)


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(x + h)


class Backbone(nn.Module):
    """Small residual net emitting stride-4/8/16/32 stages."""

    widths = (32, 48, 64, 96)

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.GroupNorm(8, 16), nn.ReLU(inplace=True)
        )
        stages = []
        c_in = 16
        for c_out in self.widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                    nn.GroupNorm(8, c_out),
                    nn.ReLU(inplace=True),
                    ResBlock(c_out),
                )
            )
            c_in = c_out
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        x = self.stem(x)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class FPN(nn.Module):
    def __init__(self, in_channels: tuple[int, ...], out_channels: int, levels: tuple[str, ...]):
        super().__init__()
        self.levels = levels
        self.laterals = nn.ModuleList(nn.Conv2d(c, out_channels, 1) for c in in_channels)
        self.outputs = nn.ModuleList(nn.Conv2d(out_channels, out_channels, 3, padding=1) for _ in in_channels)

    def forward(self, features) -> dict[str, torch.Tensor]:
        laterals = [lat(f) for lat, f in zip(self.laterals, features)]
        for i in range(len(laterals) - 2, -1, -1):
            laterals[i] = laterals[i] + F.interpolate(laterals[i + 1], scale_factor=2, mode="nearest")
        return {name: out(lat) for name, out, lat in zip(self.levels, self.outputs, laterals)}


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, 1)

    def forward(self, feature):
        h = F.relu(self.conv(feature))
        return self.objectness(h), self.deltas(h)


class BoxHead(nn.Module):
    """Two-layer MLP with class logits and class-agnostic box deltas."""

    def __init__(self, channels: int, roi_output: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc1 = nn.Linear(channels * roi_output * roi_output, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.cls = nn.Linear(hidden, num_classes + 1)
        self.box = nn.Linear(hidden, 4)

    def forward(self, rois):
        h = F.relu(self.fc1(rois.flatten(1)))
        h = F.relu(self.fc2(h))
        return self.cls(h), self.box(h)


class TwoStageDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone = Backbone()
        self.fpn = FPN(Backbone.widths, config.channels, config.levels)
        self.rpn = RPNHead(config.channels, len(config.aspect_ratios))
        self.head = BoxHead(config.channels, config.roi_output, config.head_hidden, config.num_classes)

    def pyramid(self, images: torch.Tensor) -> PyramidFeatures:
        """Batched (B, 3, H, W) images to P2-P5 features; H, W must be multiples of 32."""
        if images.shape[-1] % 32 or images.shape[-2] % 32:
            raise GeometryError(f"image dims must be divisible by 32, got {tuple(images.shape[-2:])}")
        return PyramidFeatures(self.fpn(self.backbone(images)))

    def backbone_fpn(self, image: np.ndarray | torch.Tensor) -> PyramidFeatures:
        """Single (3, H, W) image to an unbatched pyramid."""
        tensor = torch.as_tensor(np.asarray(image), dtype=torch.float32)
        if tensor.ndim != 3 or tensor.shape[0] != 3:
            raise ShapeError(f"expected (3, H, W) image, got {tuple(tensor.shape)}")
        with torch.no_grad():
            pyramid = self.pyramid(tensor.unsqueeze(0))
        return PyramidFeatures({k: v.squeeze(0) for k, v in pyramid.levels.items()})


def assign_levels(boxes: np.ndarray, config: DetectorConfig) -> np.ndarray:
    """Area-based pyramid assignment, clamped to the available levels."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    if np.any(areas <= 0):
        raise DegenerateInputError("roi_align received a zero-area box")
    k = config.canonical_level + np.floor(np.log2(np.sqrt(areas) / config.canonical_size))
    level_ids = sorted(int(np.log2(LEVEL_STRIDES[name])) for name in config.levels)
    return np.clip(k, level_ids[0], level_ids[-1]).astype(np.int64)


def _bilinear_sample(feature: torch.Tensor, ys: torch.Tensor, xs: torch.Tensor) -> torch.Tensor:
    """Sample (C, H, W) at fractional index coords; border-clamped lerp."""
    h, w = feature.shape[-2], feature.shape[-1]
    y0 = ys.floor().long().clamp(0, h - 1)
    x0 = xs.floor().long().clamp(0, w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    fy = (ys - y0.to(ys.dtype)).clamp(0, 1)
    fx = (xs - x0.to(xs.dtype)).clamp(0, 1)
    v00 = feature[:, y0, x0]
    v01 = feature[:, y0, x1]
    v10 = feature[:, y1, x0]
    v11 = feature[:, y1, x1]
    top = v00 + fx * (v01 - v00)
    bottom = v10 + fx * (v11 - v10)
    return top + fy * (bottom - top)


def _roi_align_level(feature: torch.Tensor, boxes: np.ndarray, stride: int, output_size: int) -> torch.Tensor:
    dtype = feature.dtype
    b = torch.as_tensor(boxes, dtype=dtype, device=feature.device)
    n = len(b)
    centers = (torch.arange(output_size, dtype=dtype, device=feature.device) + 0.5) / output_size
    xs = b[:, 0:1] + centers[None, :] * (b[:, 2:3] - b[:, 0:1])  # (N, S)
    ys = b[:, 1:2] + centers[None, :] * (b[:, 3:4] - b[:, 1:2])
    xi = (xs / stride - 0.5)[:, None, :].expand(n, output_size, output_size).reshape(-1)
    yi = (ys / stride - 0.5)[:, :, None].expand(n, output_size, output_size).reshape(-1)
    sampled = _bilinear_sample(feature, yi, xi)  # (C, N*S*S)
    return sampled.reshape(feature.shape[0], n, output_size, output_size).permute(1, 0, 2, 3)


def roi_align(
    pyramid: PyramidFeatures,
    boxes: np.ndarray,
    output_size: int,
    config: DetectorConfig,
) -> torch.Tensor:
    """Pool each box to (C, output_size, output_size) from its assigned level.

    Boxes are pixel coords on one image; the pyramid is unbatched. Each
    output bin samples its level bilinearly at the bin center (pixel p maps
    to index coordinate p/stride - 0.5), so constant maps pool to the
    constant and a box covering exactly one cell pools to that cell.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    sample = next(iter(pyramid.levels.values()))
    if sample.ndim != 3:
        raise ShapeError("roi_align expects an unbatched pyramid; use roi_align_batched for batches")
    levels = assign_levels(boxes, config)
    out = sample.new_zeros((len(boxes), sample.shape[0], output_size, output_size))
    for name in pyramid.levels:
        level_id = int(np.log2(LEVEL_STRIDES[name]))
        mask = levels == level_id
        if not mask.any():
            continue
        out[torch.from_numpy(np.flatnonzero(mask))] = _roi_align_level(
            pyramid.levels[name], boxes[mask], LEVEL_STRIDES[name], output_size
        )
    return out


def roi_align_batched(
    pyramid: PyramidFeatures,
    boxes: np.ndarray,
    image_ids: np.ndarray,
    output_size: int,
    config: DetectorConfig,
) -> torch.Tensor:
    """roi_align over a batched pyramid; image_ids maps each box to its image."""
    sample = next(iter(pyramid.levels.values()))
    out = sample.new_zeros((len(boxes), sample.shape[1], output_size, output_size))
    for b in range(sample.shape[0]):
        mask = image_ids == b
        if not mask.any():
            continue
        single = PyramidFeatures({k: v[b] for k, v in pyramid.levels.items()})
        out[torch.from_numpy(np.flatnonzero(mask))] = roi_align(single, boxes[mask], output_size, config)
    return out


def _flatten_rpn_outputs(logits: torch.Tensor, deltas: torch.Tensor, num_anchors: int):
    """(A, H, W) and (4A, H, W) maps to (H*W*A,) and (H*W*A, 4), cell-major."""
    h, w = logits.shape[-2], logits.shape[-1]
    obj = logits.permute(1, 2, 0).reshape(-1)
    box = deltas.view(num_anchors, 4, h, w).permute(2, 3, 0, 1).reshape(-1, 4)
    return obj, box


def match_to_targets(
    candidates: np.ndarray,
    gt_boxes: np.ndarray,
    pos_iou: float,
    neg_iou: float,
    force_best: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Label candidates 1/0/-1 (pos/neg/ignore) against ground truth by IoU.

    Returns (labels, matched_gt_index). With force_best, every ground truth
    claims its best-overlapping candidates as positive (RPN convention).
    """
    n = len(candidates)
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0 or n == 0:
        return labels, matched
    ious = boxutil.iou_matrix(candidates, gt_boxes)
    best_gt = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best_gt]
    matched = best_gt
    labels[(best_iou >= neg_iou) & (best_iou < pos_iou)] = -1
    labels[best_iou >= pos_iou] = 1
    if force_best:
        per_gt_best = ious.max(axis=0)
        for g in range(len(gt_boxes)):
            if per_gt_best[g] <= 0:
                continue
            claimers = np.flatnonzero(ious[:, g] >= per_gt_best[g] - 1e-9)
            labels[claimers] = 1
            matched[claimers] = g
    return labels, matched


def sample_balanced(labels: np.ndarray, batch: int, pos_frac: float, rng: np.random.Generator) -> np.ndarray:
    """Sample up to `batch` indices, capping positives at pos_frac of the batch."""
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(round(batch * pos_frac)))
    if len(pos) > n_pos:
        pos = np.sort(rng.choice(pos, size=n_pos, replace=False))
    n_neg = min(len(neg), batch - len(pos))
    if len(neg) > n_neg:
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    return np.concatenate([pos, neg])


def _level_shapes(pyramid: PyramidFeatures) -> dict[str, tuple[int, int]]:
    return {name: (t.shape[-2], t.shape[-1]) for name, t in pyramid.levels.items()}


def _proposals_from_rpn(
    rpn_outputs: dict[str, tuple[torch.Tensor, torch.Tensor]],
    anchors: AnchorSet,
    config: DetectorConfig,
    image_size: tuple[int, int],
    k: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, filter, and NMS per level, then keep the global top-k."""
    if k <= 0:
        raise ConfigError(f"proposal count must be > 0, got {k}")
    height, width = image_size
    all_boxes, all_scores = [], []
    for name, (obj, deltas) in rpn_outputs.items():
        scores = torch.sigmoid(obj).detach().numpy().astype(np.float64)
        deltas_np = deltas.detach().numpy().astype(np.float64)
        order = np.argsort(-scores, kind="stable")[: config.pre_nms_topk]
        boxes = boxutil.decode_deltas(deltas_np[order], anchors.per_level[name][order])
        boxes = boxutil.clip_boxes(boxes, width, height)
        wh_ok = (boxes[:, 2] - boxes[:, 0] >= 1) & (boxes[:, 3] - boxes[:, 1] >= 1)
        boxes, level_scores = boxes[wh_ok], scores[order][wh_ok]
        keep = boxutil.nms(boxes, level_scores, config.rpn_nms_iou)
        all_boxes.append(boxes[keep])
        all_scores.append(level_scores[keep])
    boxes = np.concatenate(all_boxes, axis=0)
    scores = np.concatenate(all_scores, axis=0)
    order = np.argsort(-scores, kind="stable")[:k]
    return boxes[order], scores[order]


def rpn_forward(
    model: TwoStageDetector,
    pyramid: PyramidFeatures,
    anchors: AnchorSet,
    k: int,
) -> list[Proposal]:
    """Top-k proposals from an unbatched pyramid, sorted by objectness."""
    sample = next(iter(pyramid.levels.values()))
    if sample.ndim != 3:
        raise ShapeError("rpn_forward expects an unbatched pyramid")
    height = sample.shape[-2] * LEVEL_STRIDES[next(iter(pyramid.levels))]
    width = sample.shape[-1] * LEVEL_STRIDES[next(iter(pyramid.levels))]
    outputs = {}
    with torch.no_grad():
        for name, feature in pyramid.levels.items():
            obj, deltas = model.rpn(feature.unsqueeze(0))
            flat_obj, flat_deltas = _flatten_rpn_outputs(obj[0], deltas[0], len(model.config.aspect_ratios))
            outputs[name] = (flat_obj, flat_deltas)
    boxes, scores = _proposals_from_rpn(outputs, anchors, model.config, (height, width), k)
    return [Proposal(box=b, objectness=float(s)) for b, s in zip(boxes, scores)]


@dataclass
class DetectorCheckpoint:
    config: DetectorConfig
    model_state: dict
    fusion_config: FusionConfig | None = None
    fusion_state: dict | None = None
    latent_dim: int | None = None
    encoder_checksum: str | None = None

    def build(self) -> tuple[TwoStageDetector, FusionParams | None]:
        model = TwoStageDetector(self.config)
        model.load_state_dict(self.model_state)
        model.eval()
        fusion_params = None
        if self.fusion_config is not None:
            fusion_params = FusionParams(self.latent_dim, self.config.channels, self.fusion_config)
            fusion_params.load_state_dict(self.fusion_state)
            fusion_params.eval()
        return model, fusion_params


def save_checkpoint(checkpoint: DetectorCheckpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "config": checkpoint.config.__dict__,
            "model_state": checkpoint.model_state,
            "fusion_config": None if checkpoint.fusion_config is None else {
                "mode": checkpoint.fusion_config.mode,
                "selected_levels": list(checkpoint.fusion_config.selected_levels),
                "init_policy": checkpoint.fusion_config.init_policy,
            },
            "fusion_state": checkpoint.fusion_state,
            "latent_dim": checkpoint.latent_dim,
            "encoder_checksum": checkpoint.encoder_checksum,
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> DetectorCheckpoint:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    cfg = dict(blob["config"])
    for key in ("levels", "anchor_sizes", "aspect_ratios"):
        cfg[key] = tuple(cfg[key])
    fusion_config = None
    if blob["fusion_config"] is not None:
        fc = blob["fusion_config"]
        fusion_config = FusionConfig(fc["mode"], tuple(fc["selected_levels"]), fc["init_policy"])
    return DetectorCheckpoint(
        config=DetectorConfig(**cfg),
        model_state=blob["model_state"],
        fusion_config=fusion_config,
        fusion_state=blob["fusion_state"],
        latent_dim=blob["latent_dim"],
        encoder_checksum=blob["encoder_checksum"],
    )


def _pad_image(image: np.ndarray) -> np.ndarray:
    """Zero-pad right/bottom so H and W are multiples of 32; boxes stay valid."""
    _, h, w = image.shape
    ph = (-h) % 32
    pw = (-w) % 32
    if ph == 0 and pw == 0:
        return image
    return np.pad(image, ((0, 0), (0, ph), (0, pw)))


class _FusionContext:
    """Grids plus fusion parameters used during training and inference."""

    def __init__(self, grids: dict[str, LatentGrid], fusion_config: FusionConfig, params: FusionParams):
        self.grids = grids
        self.config = fusion_config
        self.params = params

    def grid_batch(self, scenes: list[Scene], dtype) -> torch.Tensor:
        missing = [s.scene_id for s in scenes if s.scene_id not in self.grids]
        if missing:
            raise ConfigError(f"fusion enabled but no grid for scenes {missing}")
        return torch.stack(
            [torch.as_tensor(self.grids[s.scene_id].values, dtype=dtype) for s in scenes]
        )


def compute_losses(
    model: TwoStageDetector,
    scenes: list[Scene],
    rng: np.random.Generator,
    fusion_ctx: _FusionContext | None = None,
) -> dict[str, torch.Tensor]:
    """All four training losses for one batch of same-sized scenes."""
    config = model.config
    images = torch.as_tensor(np.stack([_pad_image(s.image) for s in scenes]), dtype=torch.float32)
    pyramid = model.pyramid(images)
    if fusion_ctx is not None:
        pyramid = augment_pyramid(
            pyramid, fusion_ctx.grid_batch(scenes, images.dtype), fusion_ctx.params, fusion_ctx.config
        )
    anchors = build_anchors(_level_shapes(pyramid), config)
    anchor_cat = np.concatenate([anchors.per_level[name] for name in config.levels])
    num_anchors = len(config.aspect_ratios)
    rpn_maps = {name: model.rpn(pyramid.levels[name]) for name in config.levels}

    obj_losses, rpn_box_losses = [], []
    roi_feats_boxes, roi_labels, roi_targets, roi_image_ids = [], [], [], []
    for i, scene in enumerate(scenes):
        flat_obj, flat_deltas = [], []
        for name in config.levels:
            obj_map, delta_map = rpn_maps[name]
            o, d = _flatten_rpn_outputs(obj_map[i], delta_map[i], num_anchors)
            flat_obj.append(o)
            flat_deltas.append(d)
        obj = torch.cat(flat_obj)
        deltas = torch.cat(flat_deltas)
        gt_boxes = np.asarray(scene.boxes, dtype=np.float64).reshape(-1, 4)

        labels, matched = match_to_targets(
            anchor_cat, gt_boxes, config.rpn_pos_iou, config.rpn_neg_iou, force_best=True
        )
        sampled = sample_balanced(labels, config.rpn_batch, config.rpn_pos_frac, rng)
        if len(sampled):
            target = torch.as_tensor(labels[sampled].astype(np.float32))
            obj_losses.append(F.binary_cross_entropy_with_logits(obj[sampled], target))
        pos = sampled[labels[sampled] == 1] if len(sampled) else np.zeros(0, dtype=np.int64)
        if len(pos):
            enc = boxutil.encode_deltas(gt_boxes[matched[pos]], anchor_cat[pos])
            target = torch.as_tensor(enc, dtype=deltas.dtype)
            box_loss = smooth_l1(deltas[pos] - target, config.smooth_l1_beta).sum()
            rpn_box_losses.append(box_loss / max(1, len(sampled)))

        # proposals are treated as fixed regions: no gradient through boxes
        per_level = {}
        offset = 0
        for name in config.levels:
            count = len(anchors.per_level[name])
            per_level[name] = (obj[offset:offset + count], deltas[offset:offset + count])
            offset += count
        boxes_np, _ = _proposals_from_rpn(
            per_level, anchors, config, (images.shape[-2], images.shape[-1]), config.proposals_train
        )
        if len(gt_boxes):
            boxes_np = np.concatenate([boxes_np, gt_boxes])
        p_labels, p_matched = match_to_targets(boxes_np, gt_boxes, config.roi_fg_iou, config.roi_bg_iou)
        p_sampled = sample_balanced(p_labels, config.roi_batch, config.roi_pos_frac, rng)
        if not len(p_sampled):
            continue
        for idx in p_sampled:
            cls = int(scene.labels[p_matched[idx]]) if p_labels[idx] == 1 else 0
            roi_labels.append(cls)
            if p_labels[idx] == 1:
                roi_targets.append(boxutil.encode_deltas(gt_boxes[p_matched[idx]][None], boxes_np[idx][None])[0])
            else:
                roi_targets.append(np.zeros(4))
        roi_feats_boxes.append(boxes_np[p_sampled])
        roi_image_ids.extend([i] * len(p_sampled))

    zero = torch.zeros((), dtype=images.dtype)
    losses = {
        "rpn_objectness": torch.stack(obj_losses).mean() if obj_losses else zero.clone(),
        "rpn_box": torch.stack(rpn_box_losses).mean() if rpn_box_losses else zero.clone(),
    }
    if roi_feats_boxes:
        boxes_all = np.concatenate(roi_feats_boxes)
        image_ids = np.asarray(roi_image_ids)
        feats = roi_align_batched(pyramid, boxes_all, image_ids, config.roi_output, config)
        logits, pred_deltas = model.head(feats)
        label_t = torch.as_tensor(np.asarray(roi_labels), dtype=torch.long)
        losses["head_cls"] = F.cross_entropy(logits, label_t)
        fg = label_t > 0
        if fg.any():
            target_t = torch.as_tensor(np.stack(roi_targets), dtype=pred_deltas.dtype)[fg]
            box_loss = smooth_l1(pred_deltas[fg] - target_t, config.smooth_l1_beta).sum()
            losses["head_box"] = box_loss / max(1, len(label_t))
        else:
            losses["head_box"] = zero.clone()
    else:
        logger.warning("no proposals sampled for this batch; head losses are zero")
        losses["head_cls"] = zero.clone()
        losses["head_box"] = zero.clone()
    losses["total"] = losses["rpn_objectness"] + losses["rpn_box"] + losses["head_cls"] + losses["head_box"]
    return losses


def train_detector(
    scenes: list[Scene],
    config: DetectorConfig,
    fusion: tuple[dict[str, LatentGrid], FusionConfig] | None = None,
    log_path: str | Path | None = None,
) -> DetectorCheckpoint:
    """Train detector (and fusion parameters, if enabled) on training scenes.

    The model is seeded before construction, and fusion parameters are
    created afterwards, so a fused run starts from exactly the baseline
    weights. The encoder never participates: grids are precomputed. Batches
    group scenes of equal image size. Deterministic per config.seed.
    """
    if not scenes:
        raise ConfigError("train_detector requires at least one scene")
    torch.manual_seed(config.seed)
    model = TwoStageDetector(config)
    fusion_ctx = None
    latent_dim = None
    if fusion is not None:
        grids, fusion_config = fusion
        missing = [s.scene_id for s in scenes if s.scene_id not in grids]
        if missing:
            raise ConfigError(f"grid/scene mismatch: no grids for {missing[:3]} (+{max(0, len(missing) - 3)} more)")
        latent_dim = next(iter(grids.values())).latent_dim
        params = FusionParams(latent_dim, config.channels, fusion_config)
        fusion_ctx = _FusionContext(grids, fusion_config, params)
    parameters = list(model.parameters())
    if fusion_ctx is not None:
        parameters += list(fusion_ctx.params.parameters())
    optimizer = torch.optim.Adam(parameters, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    by_shape: dict[tuple, list[int]] = {}
    for i, scene in enumerate(scenes):
        by_shape.setdefault(scene.image.shape, []).append(i)
    history = []
    model.train()
    for epoch in range(config.epochs):
        epoch_losses = []
        batches = []
        for members in by_shape.values():
            order = rng.permutation(len(members))
            for start in range(0, len(members), config.batch_size):
                batches.append([scenes[members[j]] for j in order[start:start + config.batch_size]])
        for batch in batches:
            losses = compute_losses(model, batch, rng, fusion_ctx)
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            epoch_losses.append({k: float(v.detach()) for k, v in losses.items()})
        mean_total = float(np.mean([l["total"] for l in epoch_losses])) if epoch_losses else 0.0
        history.append((epoch, mean_total))
    model.eval()
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(log_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            writer.writerows(history)
    return DetectorCheckpoint(
        config=config,
        model_state=model.state_dict(),
        fusion_config=fusion_ctx.config if fusion_ctx else None,
        fusion_state=fusion_ctx.params.state_dict() if fusion_ctx else None,
        latent_dim=latent_dim,
    )


def infer(
    checkpoint: DetectorCheckpoint,
    scene: Scene,
    score_threshold: float = 0.5,
    nms_iou: float = 0.5,
    grid: LatentGrid | None = None,
) -> list[Detection]:
    """Post-NMS detections with score >= threshold, sorted by descending score."""
    model, fusion_params = checkpoint.build()
    config = checkpoint.config
    if checkpoint.fusion_config is not None and grid is None:
        raise ConfigError(f"checkpoint expects a latent grid for scene {scene.scene_id}")
    image = torch.as_tensor(_pad_image(scene.image), dtype=torch.float32).unsqueeze(0)
    with torch.no_grad():
        pyramid = model.pyramid(image)
        if checkpoint.fusion_config is not None:
            pyramid = augment_pyramid(pyramid, grid, fusion_params, checkpoint.fusion_config)
        single = PyramidFeatures({k: v[0] for k, v in pyramid.levels.items()})
        anchors = build_anchors(_level_shapes(single), config)
        proposals = rpn_forward(model, single, anchors, config.proposals_test)
        if not proposals:
            return []
        boxes_np = np.stack([p.box for p in proposals])
        feats = roi_align(single, boxes_np, config.roi_output, config)
        logits, deltas = model.head(feats)
        probs = torch.softmax(logits, dim=1).numpy().astype(np.float64)
    decoded = boxutil.decode_deltas(deltas.numpy().astype(np.float64), boxes_np)
    decoded = boxutil.clip_boxes(decoded, scene.width, scene.height)
    detections: list[Detection] = []
    for cls in range(1, config.num_classes + 1):
        scores = probs[:, cls]
        keep = scores >= score_threshold
        wh_ok = (decoded[:, 2] - decoded[:, 0] >= 1) & (decoded[:, 3] - decoded[:, 1] >= 1)
        keep &= wh_ok
        if not keep.any():
            continue
        cls_boxes, cls_scores = decoded[keep], scores[keep]
        for idx in boxutil.nms(cls_boxes, cls_scores, nms_iou):
            detections.append(Detection(box=cls_boxes[idx], class_index=cls, score=float(cls_scores[idx])))
    detections.sort(key=lambda d: -d.score)
    return detections[: config.max_detections]


def detections_to_json(scene_id: str, detections: list[Detection]) -> list[dict]:
    return [
        {
            "scene_id": scene_id,
            "box": [float(v) for v in det.box],
            "class": int(det.class_index),
            "score": float(det.score),
        }
        for det in detections
    ]
