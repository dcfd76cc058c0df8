"""Detection metrics (greedy matching, average precision, precision/recall,
ROC/AUC over sliding-window examples) and embedding diagnostics (PCA and
first-principal-component heatmaps).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import boxes as boxutil
from .dataset import Scene
from .detector import Detection
from .errors import DegenerateInputError
from .latentgrid import LatentGrid, grid_shape

logger = logging.getLogger(__name__)


def iou(a, b) -> float:
    """Intersection over union of two boxes; raises on degenerate boxes."""
    return boxutil.iou(a, b)


@dataclass
class MatchResult:
    """Greedy one-to-one matching of detections to ground truth.

    Arrays are ordered by descending detection score; each ground truth is
    matched at most once and only to a detection of its own class.
    """

    order: np.ndarray        # indices into the input detection list
    scores: np.ndarray       # scores in matched order
    is_tp: np.ndarray        # bool per detection (matched order)
    matched_gt: np.ndarray   # gt index per detection, -1 when FP
    gt_matched: np.ndarray   # bool per ground truth

    @property
    def n_tp(self) -> int:
        return int(self.is_tp.sum())

    @property
    def n_fp(self) -> int:
        return int((~self.is_tp).sum())

    @property
    def n_fn(self) -> int:
        return int((~self.gt_matched).sum())


def match_detections(
    detections: list[Detection],
    gt_boxes: np.ndarray,
    gt_labels: np.ndarray,
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Match highest-score detections first; same class, IoU >= threshold.

    Each detection claims the unmatched same-class ground truth with the
    highest IoU, or becomes a false positive.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    order = np.argsort([-d.score for d in detections], kind="stable")
    scores = np.array([detections[i].score for i in order], dtype=np.float64)
    is_tp = np.zeros(len(order), dtype=bool)
    matched_gt = np.full(len(order), -1, dtype=np.int64)
    gt_matched = np.zeros(len(gt_boxes), dtype=bool)
    if len(gt_boxes):
        det_boxes = np.stack([detections[i].box for i in order]) if len(order) else np.zeros((0, 4))
        ious = boxutil.iou_matrix(det_boxes, gt_boxes)
        for rank, det_idx in enumerate(order):
            det = detections[det_idx]
            candidates = np.flatnonzero(
                (gt_labels == det.class_index) & ~gt_matched & (ious[rank] >= iou_threshold)
            )
            if len(candidates):
                best = candidates[np.argmax(ious[rank][candidates])]
                is_tp[rank] = True
                matched_gt[rank] = best
                gt_matched[best] = True
    return MatchResult(order, scores, is_tp, matched_gt, gt_matched)


def average_precision(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP (area under the precision envelope)."""
    if n_gt <= 0:
        raise DegenerateInputError("average_precision needs at least one ground truth")
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(is_tp[order])
    fp = np.cumsum(~is_tp[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * envelope))


def evaluate_scenes(
    per_scene_detections: list[list[Detection]],
    scenes: list[Scene],
    iou_threshold: float = 0.5,
) -> dict[int, float]:
    """Per-class AP over a scene collection, VOC style.

    Detections of each class are pooled across scenes and matched greedily
    in global score order against that scene's unmatched ground truths.
    Classes absent from the ground truth are excluded (and logged).
    """
    classes = sorted({int(l) for scene in scenes for l in scene.labels})
    predicted = {int(d.class_index) for dets in per_scene_detections for d in dets}
    for cls in sorted(predicted - set(classes)):
        logger.info("class %d has detections but no ground truth; excluded from mAP", cls)
    per_class_ap: dict[int, float] = {}
    for cls in classes:
        records = []  # (score, scene_idx, box)
        for scene_idx, dets in enumerate(per_scene_detections):
            for det in dets:
                if det.class_index == cls:
                    records.append((det.score, scene_idx, det.box))
        n_gt = sum(int((scene.labels == cls).sum()) for scene in scenes)
        records.sort(key=lambda r: -r[0])
        taken = [np.zeros(len(scene.boxes), dtype=bool) for scene in scenes]
        is_tp = np.zeros(len(records), dtype=bool)
        scores = np.array([r[0] for r in records], dtype=np.float64)
        for rank, (_, scene_idx, box) in enumerate(records):
            scene = scenes[scene_idx]
            if len(scene.boxes) == 0:
                continue
            mask = (scene.labels == cls) & ~taken[scene_idx]
            if not mask.any():
                continue
            ious = boxutil.iou_matrix(box[None], np.asarray(scene.boxes, dtype=np.float64))[0]
            ious[~mask] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_threshold:
                is_tp[rank] = True
                taken[scene_idx][best] = True
        per_class_ap[cls] = average_precision(scores, is_tp, n_gt) if n_gt else 0.0
    return per_class_ap


def map50(per_class_ap: dict[int, float]) -> float:
    """Unweighted mean of the per-class APs."""
    if not per_class_ap:
        return 0.0
    return float(np.mean(list(per_class_ap.values())))


def precision_recall_f1(
    per_scene_detections: list[list[Detection]],
    scenes: list[Scene],
    iou_threshold: float = 0.5,
    score_threshold: float = 0.5,
) -> tuple[float, float, float]:
    """Micro P/R/F1 over detections with score >= score_threshold."""
    tp = fp = n_gt = 0
    for dets, scene in zip(per_scene_detections, scenes):
        kept = [d for d in dets if d.score >= score_threshold]
        result = match_detections(kept, scene.boxes, scene.labels, iou_threshold)
        tp += result.n_tp
        fp += result.n_fp
        n_gt += len(scene.boxes)
    if tp + fp == 0:
        logger.warning("no detections at score threshold; precision defined as 0")
        precision = 0.0
    else:
        precision = tp / (tp + fp)
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def roc_auc(examples: list[tuple[float, int]]) -> tuple[list[tuple[float, float]], float]:
    """ROC curve points and trapezoidal AUC over (score, binary label) pairs.

    Thresholds sweep the unique scores; tied scores move together, which
    makes the AUC equal the normalized Mann-Whitney U statistic.
    """
    scores = np.array([s for s, _ in examples], dtype=np.float64)
    labels = np.array([int(l) for _, l in examples], dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("roc_auc needs both positive and negative examples")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    curve = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and sorted_scores[j] == sorted_scores[i]:
            tp += int(sorted_labels[j] == 1)
            fp += int(sorted_labels[j] == 0)
            j += 1
        curve.append((fp / n_neg, tp / n_pos))
        i = j
    fpr = np.array([p[0] for p in curve])
    tpr = np.array([p[1] for p in curve])
    auc = float(np.trapz(tpr, fpr))
    return curve, auc


def window_roc_examples(
    scenes: list[Scene],
    per_scene_detections: list[list[Detection]],
    window: int,
    stride: int,
    iou_threshold: float = 0.5,
) -> list[tuple[float, int]]:
    """Window-level (score, label) examples for detector ROC analysis.

    A window is positive when some ground-truth box overlaps it at
    IoU >= iou_threshold; its score is the maximum confidence among
    detections overlapping it at the same IoU bar (0 when none do).
    """
    examples = []
    for scene, dets in zip(scenes, per_scene_detections):
        h_g, w_g = grid_shape(scene.height, scene.width, window, stride)
        windows = np.array(
            [
                [j * stride, i * stride, j * stride + window, i * stride + window]
                for i in range(h_g)
                for j in range(w_g)
            ],
            dtype=np.float64,
        )
        gt = np.asarray(scene.boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.zeros(len(windows), dtype=np.int64)
        if len(gt):
            labels = (boxutil.iou_matrix(windows, gt).max(axis=1) >= iou_threshold).astype(np.int64)
        scores = np.zeros(len(windows))
        if dets:
            det_boxes = np.stack([d.box for d in dets])
            det_scores = np.array([d.score for d in dets])
            overlap = boxutil.iou_matrix(windows, det_boxes) >= iou_threshold
            masked = np.where(overlap, det_scores[None, :], 0.0)
            scores = masked.max(axis=1)
        examples.extend((float(s), int(l)) for s, l in zip(scores, labels))
    return examples


@dataclass
class PCAModel:
    """Mean, orthonormal axes (rows), and explained-variance shares."""

    mean: np.ndarray
    axes: np.ndarray              # (D, D), row k is principal axis k
    variance_shares: np.ndarray   # (D,), non-increasing, sums to 1


def fit_pca(vectors: np.ndarray) -> PCAModel:
    """PCA via SVD of the centered data; axis signs are fixed so the
    largest-magnitude component of each axis is positive."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise DegenerateInputError(f"fit_pca needs >= 2 vectors, got shape {x.shape}")
    mean = x.mean(axis=0)
    centered = x - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=True)
    variances = np.zeros(x.shape[1])
    variances[: len(s)] = (s ** 2) / (x.shape[0] - 1)
    total = variances.sum()
    if total <= 0:
        raise DegenerateInputError("fit_pca received zero-variance input")
    for k in range(vt.shape[0]):
        pivot = np.argmax(np.abs(vt[k]))
        if vt[k, pivot] < 0:
            vt[k] = -vt[k]
    return PCAModel(mean=mean, axes=vt, variance_shares=variances / total)


def project(model: PCAModel, vectors: np.ndarray, k: int) -> np.ndarray:
    """Coordinates of vectors on the first k principal axes."""
    x = np.asarray(vectors, dtype=np.float64)
    return (x - model.mean) @ model.axes[:k].T


def reconstruct(model: PCAModel, coords: np.ndarray) -> np.ndarray:
    """Centered reconstruction from k-dimensional PCA coordinates."""
    coords = np.asarray(coords, dtype=np.float64)
    return coords @ model.axes[: coords.shape[1]]


def pc1_heatmap(model: PCAModel, grid: LatentGrid) -> np.ndarray:
    """First-principal-component score per grid cell, min-max normalized."""
    d, h_g, w_g = grid.values.shape
    if d != model.axes.shape[1]:
        raise DegenerateInputError(f"grid dimension {d} does not match PCA dimension {model.axes.shape[1]}")
    flat = grid.values.reshape(d, -1).T
    scores = project(model, flat, 1)[:, 0].reshape(h_g, w_g)
    lo, hi = scores.min(), scores.max()
    if hi - lo <= 0:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


@dataclass
class MetricsReport:
    """Scalar detection metrics for one evaluated run."""

    map50: float
    precision: float
    recall: float
    f1: float
    per_class_ap: dict[int, float] = field(default_factory=dict)
    auc: float | None = None
    seed: int | None = None
    split_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "auc": self.auc,
            "seed": self.seed,
            "split_id": self.split_id,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricsReport":
        return cls(
            map50=doc["map50"],
            precision=doc["precision"],
            recall=doc["recall"],
            f1=doc["f1"],
            per_class_ap={int(k): v for k, v in doc.get("per_class_ap", {}).items()},
            auc=doc.get("auc"),
            seed=doc.get("seed"),
            split_id=doc.get("split_id"),
        )


def compute_report(
    per_scene_detections: list[list[Detection]],
    scenes: list[Scene],
    score_threshold: float = 0.5,
    roc_examples: list[tuple[float, int]] | None = None,
    seed: int | None = None,
    split_id: str | None = None,
) -> MetricsReport:
    per_class = evaluate_scenes(per_scene_detections, scenes)
    precision, recall, f1 = precision_recall_f1(
        per_scene_detections, scenes, score_threshold=score_threshold
    )
    auc = None
    if roc_examples:
        try:
            _, auc = roc_auc(roc_examples)
        except DegenerateInputError as err:
            logger.warning("AUC undefined: %s", err)
    return MetricsReport(
        map50=map50(per_class),
        precision=precision,
        recall=recall,
        f1=f1,
        per_class_ap=per_class,
        auc=auc,
        seed=seed,
        split_id=split_id,
    )
