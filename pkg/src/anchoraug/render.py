"""Three-panel SVG rendering of a scene's proposal stages.

Panels left to right: hand-designed anchors, augmented anchors, refined
proposals. Ground truth boxes are drawn in every panel with a distinct
stroke. One ``<rect>`` element per box, emitted in input order, so output
bytes are deterministic.
"""

from __future__ import annotations

import numpy as np

from .fsio import atomic_write_text
from .pipeline import Scene

GT_STROKE = "#d62728"
STAGE_STROKE = "#1f77b4"
PANEL_GAP = 16
PANEL_TITLES = ("hand anchors", "augmented anchors", "proposals")


def _fmt(value: float) -> str:
    return f"{value:.3f}".rstrip("0").rstrip(".")


def _rect(box: np.ndarray, ox: float, oy: float, stroke: str) -> str:
    x1, y1, x2, y2 = box
    w = max(float(x2 - x1), 0.0)
    h = max(float(y2 - y1), 0.0)
    return (
        f'<rect x="{_fmt(ox + x1)}" y="{_fmt(oy + y1)}" width="{_fmt(w)}" height="{_fmt(h)}" '
        f'fill="none" stroke="{stroke}" stroke-width="1"/>'
    )


def scene_svg(
    scene: Scene,
    hand_boxes: np.ndarray,
    augmented_boxes: np.ndarray,
    proposal_boxes: np.ndarray,
) -> str:
    """Render the three stages side by side and return the SVG text."""
    panels = [
        np.asarray(hand_boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(augmented_boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4),
    ]
    pw, ph = scene.image_width, scene.image_height
    title_h = 18
    total_w = 3 * pw + 4 * PANEL_GAP
    total_h = ph + 2 * PANEL_GAP + title_h
    parts = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{total_h}" '
        f'viewBox="0 0 {total_w} {total_h}">',
        f'<rect x="0" y="0" width="{total_w}" height="{total_h}" fill="white"/>',
    ]
    for i, boxes in enumerate(panels):
        ox = PANEL_GAP + i * (pw + PANEL_GAP)
        oy = PANEL_GAP + title_h
        parts.append(
            f'<text x="{ox}" y="{PANEL_GAP + 12}" font-family="monospace" font-size="12">'
            f"{PANEL_TITLES[i]}</text>"
        )
        parts.append(
            f'<rect x="{ox}" y="{oy}" width="{pw}" height="{ph}" fill="none" '
            f'stroke="#888888" stroke-width="1"/>'
        )
        for box in boxes:
            parts.append(_rect(box, ox, oy, STAGE_STROKE))
        for gt in scene.gt_boxes:
            parts.append(_rect(gt, ox, oy, GT_STROKE))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_scene_svg(
    scene: Scene,
    hand_boxes: np.ndarray,
    augmented_boxes: np.ndarray,
    proposal_boxes: np.ndarray,
    path,
) -> None:
    atomic_write_text(path, scene_svg(scene, hand_boxes, augmented_boxes, proposal_boxes))
