"""Axis-aligned box geometry: IoU, anchor grids, box deltas, NMS, clipping.

Coordinate convention
---------------------
Boxes are continuous corner rectangles ``(x1, y1, x2, y2)`` in image-pixel
coordinates with ``area = (x2 - x1) * (y2 - y1)``. There is no "+1" pixel
convention; this matches continuous RoI sampling downstream.

Bulk operations accept float64 arrays of shape ``(N, 4)`` (or anything
:func:`as_box_array` can normalize, including sequences of :class:`Box`).
Scalar convenience wrappers operate on :class:`Box` / :class:`Delta4`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

# Decoded widths/heights are capped at exp(DELTA_CLAMP) times the anchor size
# so an untrained head cannot overflow the decode.
DELTA_CLAMP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous image-pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in np.asarray(arr, dtype=np.float64))
        return cls(x1, y1, x2, y2)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))


@dataclass(frozen=True)
class Delta4:
    """Dimensionless box-regression offsets (dx, dy, dw, dh)."""

    dx: float
    dy: float
    dw: float
    dh: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "Delta4":
        dx, dy, dw, dh = (float(v) for v in np.asarray(arr, dtype=np.float64))
        return cls(dx, dy, dw, dh)


@dataclass(frozen=True)
class AnchorSpec:
    """Discrete anchor family: conv kernel (h, w), dilation, and stride.

    The placed anchor at feature cell (r, c) has its center at
    ``((c + 0.5) * stride, (r + 0.5) * stride)`` and measures
    ``kernel_w * dilation * stride`` by ``kernel_h * dilation * stride``
    pixels, so its footprint coincides with the taps of a dilated
    convolution at that cell.
    """

    kernel_h: int
    kernel_w: int
    dilation: int
    stride: int

    def __post_init__(self) -> None:
        for name in ("kernel_h", "kernel_w", "dilation", "stride"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"AnchorSpec.{name} must be a positive integer, got {value!r}")


@dataclass(frozen=True)
class Anchor:
    """One placed anchor: its box, grid cell, pyramid level, and spec."""

    box: Box
    level_index: int
    cell_row: int
    cell_col: int
    spec: AnchorSpec
    on_grid: bool = True


def anchor_scale(spec: AnchorSpec) -> float:
    """Anchor scale in feature cells: dilation * sqrt(kernel_h * kernel_w)."""
    return spec.dilation * math.sqrt(spec.kernel_h * spec.kernel_w)


def anchor_aspect_ratio(spec: AnchorSpec) -> float:
    """Anchor aspect ratio (width over height): kernel_w / kernel_h."""
    return spec.kernel_w / spec.kernel_h


def as_box_array(boxes) -> np.ndarray:
    """Normalize boxes to a float64 array of shape (N, 4).

    Accepts an ``(N, 4)`` (or ``(4,)``) array, a single :class:`Box`, or a
    sequence of :class:`Box` / 4-vectors.
    """
    if isinstance(boxes, Box):
        return boxes.to_array().reshape(1, 4)
    if isinstance(boxes, np.ndarray):
        arr = np.asarray(boxes, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, 4) if arr.size == 4 else arr.reshape(-1, 4)
        if arr.ndim != 2 or arr.shape[1] != 4:
            raise ValueError(f"box array must have shape (N, 4), got {arr.shape}")
        return arr
    rows = [b.to_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64) for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack(rows).reshape(-1, 4)


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = as_box_array(boxes)
    w = np.clip(boxes[:, 2] - boxes[:, 0], 0.0, None)
    h = np.clip(boxes[:, 3] - boxes[:, 1], 0.0, None)
    return w * h


def iou(a: Box | np.ndarray, b: Box | np.ndarray) -> float:
    """Intersection over union of two boxes; 0 when disjoint or degenerate."""
    m = match_quality_matrix(as_box_array(a), as_box_array(b))
    return float(m[0, 0])


def match_quality_matrix(anchors, gts) -> np.ndarray:
    """Pairwise IoU matrix, entry (i, j) = iou(anchors[i], gts[j])."""
    a = as_box_array(anchors)
    g = as_box_array(gts)
    if a.shape[0] == 0 or g.shape[0] == 0:
        return np.zeros((a.shape[0], g.shape[0]), dtype=np.float64)
    ix1 = np.maximum(a[:, None, 0], g[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], g[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], g[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], g[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    union = box_areas(a)[:, None] + box_areas(g)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0.0)
    return out


@lru_cache(maxsize=256)
def anchor_grid_boxes(spec: AnchorSpec, feature_h: int, feature_w: int) -> np.ndarray:
    """Row-major (feature_h * feature_w, 4) array of on-grid anchor boxes.

    The result is cached and returned read-only; callers must copy before
    mutating.
    """
    if feature_h < 1 or feature_w < 1:
        raise ValueError("feature map dims must be >= 1")
    s = float(spec.stride)
    cx = (np.arange(feature_w, dtype=np.float64) + 0.5) * s
    cy = (np.arange(feature_h, dtype=np.float64) + 0.5) * s
    half_w = 0.5 * spec.kernel_w * spec.dilation * s
    half_h = 0.5 * spec.kernel_h * spec.dilation * s
    gx, gy = np.meshgrid(cx, cy)
    boxes = np.stack(
        [gx - half_w, gy - half_h, gx + half_w, gy + half_h], axis=-1
    ).reshape(-1, 4)
    boxes.setflags(write=False)
    return boxes


def generate_anchor_grid(
    spec: AnchorSpec, feature_h: int, feature_w: int, level_index: int = 0
) -> list[Anchor]:
    """Place one anchor per feature cell, centered on the cell center."""
    boxes = anchor_grid_boxes(spec, feature_h, feature_w)
    anchors = []
    for r in range(feature_h):
        for c in range(feature_w):
            anchors.append(
                Anchor(
                    box=Box.from_array(boxes[r * feature_w + c]),
                    level_index=level_index,
                    cell_row=r,
                    cell_col=c,
                    spec=spec,
                    on_grid=True,
                )
            )
    return anchors


def encode_deltas(anchors, targets) -> np.ndarray:
    """Encode target boxes as offsets relative to anchors.

    dx = (tcx - acx) / aw, dy = (tcy - acy) / ah,
    dw = ln(tw / aw),      dh = ln(th / ah).

    Raises ValueError if any anchor or target has non-positive
    width or height.
    """
    a = as_box_array(anchors)
    t = as_box_array(targets)
    if a.shape != t.shape:
        raise ValueError(f"anchor/target shape mismatch: {a.shape} vs {t.shape}")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    tw = t[:, 2] - t[:, 0]
    th = t[:, 3] - t[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise ValueError("encode_deltas requires anchors with positive width and height")
    if np.any(tw <= 0.0) or np.any(th <= 0.0):
        raise ValueError("encode_deltas requires targets with positive width and height")
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    tcx = t[:, 0] + 0.5 * tw
    tcy = t[:, 1] + 0.5 * th
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )


def decode_deltas(anchors, deltas: np.ndarray) -> np.ndarray:
    """Apply regression offsets to anchors; dw/dh are clamped to DELTA_CLAMP."""
    a = as_box_array(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if a.shape != d.shape:
        raise ValueError(f"anchor/delta shape mismatch: {a.shape} vs {d.shape}")
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0.0) or np.any(ah <= 0.0):
        raise ValueError("decode_deltas requires anchors with positive width and height")
    acx = a[:, 0] + 0.5 * aw
    acy = a[:, 1] + 0.5 * ah
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(np.clip(d[:, 2], -DELTA_CLAMP, DELTA_CLAMP))
    h = ah * np.exp(np.clip(d[:, 3], -DELTA_CLAMP, DELTA_CLAMP))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_delta(anchor: Box, target: Box) -> Delta4:
    return Delta4.from_array(encode_deltas(anchor, target)[0])


def decode_delta(anchor: Box, delta: Delta4) -> Box:
    return Box.from_array(decode_deltas(anchor, delta.to_array().reshape(1, 4))[0])


def clip_boxes_to_image(boxes, width: int, height: int) -> np.ndarray:
    """Clamp coordinates to [0, width] x [0, height]."""
    arr = as_box_array(boxes).copy()
    arr[:, 0::2] = np.clip(arr[:, 0::2], 0.0, float(width))
    arr[:, 1::2] = np.clip(arr[:, 1::2], 0.0, float(height))
    return arr


def clip_to_image(box: Box, width: int, height: int) -> Box:
    return Box.from_array(clip_boxes_to_image(box, width, height)[0])


def nms(
    boxes,
    scores: Sequence[float] | np.ndarray,
    iou_threshold: float,
    max_keep: int | None = None,
) -> np.ndarray:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring surviving box and suppresses every
    remaining box whose IoU with it exceeds ``iou_threshold``. Ties on score
    are broken toward the lower original index. Returns kept indices in
    descending-score order, truncated at ``max_keep`` when given.
    """
    arr = as_box_array(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if arr.shape[0] != s.shape[0]:
        raise ValueError("boxes and scores must have equal length")
    n = arr.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # Stable sort on negated scores keeps original order among ties.
    order = np.argsort(-s, kind="stable")
    x1, y1, x2, y2 = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    areas = np.clip(x2 - x1, 0.0, None) * np.clip(y2 - y1, 0.0, None)
    kept: list[int] = []
    while order.size > 0:
        i = order[0]
        kept.append(int(i))
        if max_keep is not None and len(kept) >= max_keep:
            break
        rest = order[1:]
        ix1 = np.maximum(x1[i], x1[rest])
        iy1 = np.maximum(y1[i], y1[rest])
        ix2 = np.minimum(x2[i], x2[rest])
        iy2 = np.minimum(y2[i], y2[rest])
        inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
        union = areas[i] + areas[rest] - inter
        overlap = np.zeros_like(inter)
        np.divide(inter, union, out=overlap, where=union > 0.0)
        order = rest[overlap <= iou_threshold]
    return np.asarray(kept, dtype=np.int64)
