"""Synthetic scenes: sampled ground truth plus a feature pyramid rendered
from it.

The pyramid stands in for a learned backbone. Its channels carry an explicit
localization signal so a proposal head can actually be trained against it:

  0. indicator: cell center inside any ground truth box
  1. horizontal offset to the assigned ground truth center, in strides,
     zeroed for cells farther than OFFSET_RADIUS strides from that center
  2. vertical offset, same units and radius
  3. log width of the assigned ground truth, in strides
  4. log height, in strides

Each cell is assigned the smallest ground truth containing its center, or
the nearest-center ground truth when none does. Cells beyond the offset
radius carry no pull toward any box, so they stay put and read as clean
background. Channels past the first five are fixed seeded linear projections
of these, so wider heads see redundant mixtures rather than noise. Rendering
is a pure function of the ground truth and config.
"""

from __future__ import annotations

import math

import numpy as np

from .config import ExperimentConfig
from .pipeline import Scene
from .tensor import FeaturePyramid

OFFSET_RADIUS = 8.0
BASE_CHANNELS = 5


def _level_dims(image_size: int, stride: int) -> tuple[int, int]:
    return -(-image_size // stride), -(-image_size // stride)


def render_feature_pyramid(gt_boxes: np.ndarray, cfg: ExperimentConfig) -> FeaturePyramid:
    """Deterministically rasterize ground truth into pyramid features."""
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    num_channels = cfg.feature_channels
    extra = num_channels - BASE_CHANNELS
    if extra > 0:
        proj_rng = np.random.default_rng(cfg.projection_seed)
        projection = proj_rng.normal(size=(extra, BASE_CHANNELS)) / math.sqrt(BASE_CHANNELS)
    levels = []
    for stride in cfg.strides:
        h, w = _level_dims(cfg.image_size, stride)
        if gt.shape[0] == 0:
            levels.append(np.zeros((num_channels, h, w), dtype=np.float64))
            continue
        xs = (np.arange(w, dtype=np.float64) + 0.5) * stride
        ys = (np.arange(h, dtype=np.float64) + 0.5) * stride
        gx, gy = np.meshgrid(xs, ys)
        centers_x = 0.5 * (gt[:, 0] + gt[:, 2])
        centers_y = 0.5 * (gt[:, 1] + gt[:, 3])
        widths = gt[:, 2] - gt[:, 0]
        heights = gt[:, 3] - gt[:, 1]
        dist2 = (gx[..., None] - centers_x) ** 2 + (gy[..., None] - centers_y) ** 2
        contains = (
            (gx[..., None] >= gt[:, 0])
            & (gx[..., None] <= gt[:, 2])
            & (gy[..., None] >= gt[:, 1])
            & (gy[..., None] <= gt[:, 3])
        )
        inside = contains.any(axis=-1)
        # Assign the smallest containing box, else the nearest center, so
        # nested boxes keep their own signal.
        areas = widths * heights
        big = float(areas.max()) + 1.0
        containment_rank = np.where(contains, areas, big + dist2 / (dist2.max() + 1.0))
        nearest = np.where(inside, np.argmin(containment_rank, axis=-1), np.argmin(dist2, axis=-1))
        raw_x = (centers_x[nearest] - gx) / stride
        raw_y = (centers_y[nearest] - gy) / stride
        in_range = raw_x**2 + raw_y**2 <= OFFSET_RADIUS**2
        off_x = np.where(in_range, raw_x, 0.0)
        off_y = np.where(in_range, raw_y, 0.0)
        log_w = np.log(widths[nearest] / stride)
        log_h = np.log(heights[nearest] / stride)
        base = np.stack([inside.astype(np.float64), off_x, off_y, log_w, log_h])
        if extra > 0:
            mixed = np.tensordot(projection, base, axes=1)
            fmap = np.concatenate([base, mixed], axis=0)
        else:
            fmap = base[:num_channels]
        levels.append(fmap)
    return FeaturePyramid(
        levels=tuple(levels),
        strides=cfg.strides,
        image_width=cfg.image_size,
        image_height=cfg.image_size,
    )


def generate_synthetic_scene(rng: np.random.Generator, cfg: ExperimentConfig) -> Scene:
    """Sample ground truth boxes inside the image and render their pyramid."""
    count = int(rng.integers(cfg.boxes_min, cfg.boxes_max + 1))
    size = cfg.image_size
    boxes = np.zeros((count, 4), dtype=np.float64)
    if count:
        scales = np.exp(
            rng.uniform(math.log(cfg.gt_size_min), math.log(cfg.gt_size_max), size=count)
        )
        aspects = np.exp(
            rng.uniform(math.log(cfg.gt_aspect_min), math.log(cfg.gt_aspect_max), size=count)
        )
        widths = np.minimum(scales * np.sqrt(aspects), size - 1.0)
        heights = np.minimum(scales / np.sqrt(aspects), size - 1.0)
        cx = rng.uniform(widths / 2.0, size - widths / 2.0)
        cy = rng.uniform(heights / 2.0, size - heights / 2.0)
        boxes = np.stack(
            [cx - widths / 2.0, cy - heights / 2.0, cx + widths / 2.0, cy + heights / 2.0],
            axis=1,
        )
    return Scene(
        image_width=size,
        image_height=size,
        gt_boxes=boxes,
        features=render_feature_pyramid(boxes, cfg),
    )
