"""Anchors, box parameterization, overlaps, anchor assignment and NMS.

Boxes are carried as ``[N, 4]`` float arrays in center form
``(cx, cy, w, h)`` in image pixels; :class:`Box` is the scalar convenience
type.  Pixel ``i`` covers ``[i, i + 1)``, so coordinates are continuous.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ANCHOR_SIZES = (4, 6, 10, 16, 22, 32)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"box extents must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "Box":
        return cls((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


def to_corners(boxes: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    half = b[:, 2:] / 2.0
    return np.concatenate([b[:, :2] - half, b[:, :2] + half], axis=1)


def from_corners(corners: np.ndarray) -> np.ndarray:
    c = np.asarray(corners, dtype=np.float64).reshape(-1, 4)
    return np.stack(
        [(c[:, 0] + c[:, 2]) / 2, (c[:, 1] + c[:, 3]) / 2, c[:, 2] - c[:, 0], c[:, 3] - c[:, 1]],
        axis=1,
    )


@dataclass
class AnchorSet:
    sizes: tuple[int, ...]
    feature_stride: int
    feature_shape: tuple[int, int]
    boxes: np.ndarray  # [H*W*len(sizes), 4], ordered (row, col, size)

    def __len__(self) -> int:
        return len(self.boxes)

    def inside(self, image_height: float, image_width: float) -> np.ndarray:
        """Mask of anchors lying fully inside the image."""
        c = to_corners(self.boxes)
        return (c[:, 0] >= 0) & (c[:, 1] >= 0) & (c[:, 2] <= image_width) & (c[:, 3] <= image_height)


def generate_anchors(feature_shape, stride: int, sizes=ANCHOR_SIZES) -> AnchorSet:
    """Square anchors of every size centered on every feature cell."""
    if stride < 1:
        raise ValueError("feature stride must be >= 1")
    sizes = tuple(sizes)
    if not sizes:
        raise ValueError("at least one anchor size is required")
    fh, fw = feature_shape
    rows, cols, sz = np.meshgrid(np.arange(fh), np.arange(fw), np.asarray(sizes, float), indexing="ij")
    boxes = np.stack(
        [(cols + 0.5) * stride, (rows + 0.5) * stride, sz, sz], axis=-1
    ).reshape(-1, 4)
    return AnchorSet(sizes, stride, (fh, fw), boxes)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection-over-union of center-form boxes, ``[len(a), len(b)]``."""
    ca, cb = to_corners(a), to_corners(b)
    ix1 = np.maximum(ca[:, None, 0], cb[None, :, 0])
    iy1 = np.maximum(ca[:, None, 1], cb[None, :, 1])
    ix2 = np.minimum(ca[:, None, 2], cb[None, :, 2])
    iy2 = np.minimum(ca[:, None, 3], cb[None, :, 3])
    inter = np.clip(ix2 - ix1, 0, None) * np.clip(iy2 - iy1, 0, None)
    area_a = (ca[:, 2] - ca[:, 0]) * (ca[:, 3] - ca[:, 1])
    area_b = (cb[:, 2] - cb[:, 0]) * (cb[:, 3] - cb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def encode(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Regression targets of ``gts`` relative to ``anchors`` (row-aligned)."""
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    if np.any(g[:, 2:] <= 0) or np.any(a[:, 2:] <= 0):
        raise ValueError("boxes must have positive extents to be encoded")
    return np.stack(
        [
            (g[:, 0] - a[:, 0]) / a[:, 2],
            (g[:, 1] - a[:, 1]) / a[:, 3],
            np.log(g[:, 2] / a[:, 2]),
            np.log(g[:, 3] / a[:, 3]),
        ],
        axis=1,
    )


def decode(anchors: np.ndarray, deltas: np.ndarray, max_log_ratio: float | None = None) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    tw, th = d[:, 2], d[:, 3]
    if max_log_ratio is not None:
        tw = np.minimum(tw, max_log_ratio)
        th = np.minimum(th, max_log_ratio)
    return np.stack(
        [
            a[:, 0] + d[:, 0] * a[:, 2],
            a[:, 1] + d[:, 1] * a[:, 3],
            a[:, 2] * np.exp(tw),
            a[:, 3] * np.exp(th),
        ],
        axis=1,
    )


def encode_box(anchor: Box, gt: Box) -> BoxDelta:
    return BoxDelta(*encode(anchor.as_array(), gt.as_array())[0])


def decode_box(anchor: Box, delta: BoxDelta) -> Box:
    return Box(*decode(anchor.as_array(), delta.as_array())[0])


def clip_boxes(boxes: np.ndarray, height: float, width: float) -> np.ndarray:
    c = to_corners(boxes)
    c[:, [0, 2]] = np.clip(c[:, [0, 2]], 0, width)
    c[:, [1, 3]] = np.clip(c[:, [1, 3]], 0, height)
    return from_corners(c)


@dataclass
class Assignment:
    labels: np.ndarray  # POSITIVE / NEGATIVE / IGNORE per anchor
    matched: np.ndarray  # index of best-overlap gt, -1 when there are none
    max_iou: np.ndarray


def assign_anchors(
    anchors,
    gts,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    inside: np.ndarray | None = None,
) -> Assignment:
    """Label anchors against ground truth.

    Positive when IoU >= ``pos_iou`` with some gt or when the anchor attains
    a gt's highest IoU (ties included); negative when the best IoU is below
    ``neg_iou``; ignored otherwise.  Anchors outside ``inside`` are ignored
    and do not compete for the per-gt best match.
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else np.asarray(anchors, float).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    valid = np.ones(n, bool) if inside is None else np.asarray(inside, bool)
    labels = np.full(n, IGNORE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    max_iou = np.zeros(n)
    if len(gts) == 0:
        labels[valid] = NEGATIVE
        return Assignment(labels, matched, max_iou)

    idx = np.flatnonzero(valid)
    overlaps = iou_matrix(boxes[idx], gts)
    best_gt = overlaps.argmax(axis=1)
    best = overlaps[np.arange(len(idx)), best_gt]
    sub = np.full(len(idx), IGNORE, dtype=np.int8)
    sub[best < neg_iou] = NEGATIVE
    if len(idx):
        gt_best = overlaps.max(axis=0)
        for g, top in enumerate(gt_best):
            if top > 0:
                sub[overlaps[:, g] == top] = POSITIVE
    sub[best >= pos_iou] = POSITIVE
    labels[idx] = sub
    matched[idx] = best_gt
    max_iou[idx] = best
    return Assignment(labels, matched, max_iou)


def nms(boxes, scores, iou_threshold: float) -> list[int]:
    """Greedy non-maximum suppression.

    Visits boxes by descending score (ties: lower index first) and drops any
    box whose IoU with an already kept box exceeds ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError("boxes and scores differ in length")
    order = np.argsort(-scores, kind="stable")
    c = to_corners(boxes)
    areas = (c[:, 2] - c[:, 0]) * (c[:, 3] - c[:, 1])
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        rest = order[1:]
        w = np.clip(np.minimum(c[i, 2], c[rest, 2]) - np.maximum(c[i, 0], c[rest, 0]), 0, None)
        h = np.clip(np.minimum(c[i, 3], c[rest, 3]) - np.maximum(c[i, 1], c[rest, 1]), 0, None)
        inter = w * h
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return keep
