"""Box geometry utilities shared by the dataset, detector, and evaluation code.

Boxes are (x_min, y_min, x_max, y_max) in pixels, corner-exclusive, as
float arrays. All functions are pure numpy.
"""
from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, InvalidBoxError


def validate_box(box, context: str = "") -> None:
    """Raise InvalidBoxError unless x_min < x_max and y_min < y_max."""
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x0 < x1 and y0 < y1):
        where = f" ({context})" if context else ""
        raise InvalidBoxError(f"degenerate box {box!r}{where}: requires x_min < x_max and y_min < y_max")


def box_area(box) -> float:
    x0, y0, x1, y1 = (float(v) for v in box)
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def iou(a, b) -> float:
    """IoU of two boxes; 0 for disjoint boxes. Degenerate boxes are rejected."""
    if box_area(a) <= 0 or box_area(b) <= 0:
        raise DegenerateInputError(f"iou of degenerate box: {a!r} vs {b!r}")
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = float(ix) * float(iy)
    return inter / (box_area(a) + box_area(b) - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between boxes a (N,4) and b (M,4); returns (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    """Clip boxes to [0, width] x [0, height]."""
    out = np.asarray(boxes, dtype=np.float64).reshape(-1, 4).copy()
    out[:, 0] = np.clip(out[:, 0], 0, width)
    out[:, 2] = np.clip(out[:, 2], 0, width)
    out[:, 1] = np.clip(out[:, 1], 0, height)
    out[:, 3] = np.clip(out[:, 3], 0, height)
    return out


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS; returns kept indices sorted by descending score.

    Equal scores tie-break on the lower box index, so the result does not
    depend on input ordering among ties.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size > 0:
        i = int(order[0])
        keep.append(i)
        if order.size == 1:
            break
        rest = order[1:]
        ious = iou_matrix(boxes[i][None], boxes[rest])[0]
        order = rest[ious <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def encode_deltas(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Encode target boxes relative to anchors as (dx, dy, dw, dh)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode_deltas(deltas: np.ndarray, anchors: np.ndarray, clip_wh: float = 4.0) -> np.ndarray:
    """Invert encode_deltas. dw/dh are clipped at `clip_wh` before exp."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bx = ax + deltas[:, 0] * aw
    by = ay + deltas[:, 1] * ah
    bw = aw * np.exp(np.clip(deltas[:, 2], -clip_wh, clip_wh))
    bh = ah * np.exp(np.clip(deltas[:, 3], -clip_wh, clip_wh))
    return np.stack([bx - 0.5 * bw, by - 0.5 * bh, bx + 0.5 * bw, by + 0.5 * bh], axis=1)
