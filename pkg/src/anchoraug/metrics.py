"""Proposal-quality evaluation: average recall and anchor-quality statistics.

Average recall follows the COCO convention: recall of the top-K proposals is
averaged over the IoU thresholds 0.50:0.05:0.95, with per-size breakdowns at
the 32^2 / 96^2 area breakpoints. Anchor quality is summarized by the mean
best-overlap per ground truth and by how well overlap separates positive
from negative anchors (rank AUC).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import match_quality_matrix

DEFAULT_IOU_THRESHOLDS = tuple(0.5 + 0.05 * i for i in range(10))
SMALL_AREA = 32.0**2
MEDIUM_AREA = 96.0**2


@dataclass(frozen=True)
class RecallReport:
    """Recall of the top-``k`` proposals; size fields are None when that
    size class has no ground truth."""

    k: int
    num_gts: int
    thresholds: tuple[float, ...]
    recalls: tuple[float, ...] | None
    ar: float | None
    ar_small: float | None
    ar_medium: float | None
    ar_large: float | None


@dataclass(frozen=True)
class AnchorQualityReport:
    mean_best_iou: float
    auc_roc: float
    num_positive: int
    num_negative: int


def match_counts(
    proposal_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    k: int,
    thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS,
) -> np.ndarray:
    """Matched ground-truth counts per threshold for the top-k proposals.

    Proposals must already be sorted by descending score. At each threshold,
    ground truths greedily claim their best still-unmatched proposal with
    IoU at or above the threshold; each proposal matches at most once.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    boxes = np.asarray(proposal_boxes, dtype=np.float64).reshape(-1, 4)[:k]
    counts = np.zeros(len(thresholds), dtype=np.int64)
    if gt_boxes.shape[0] == 0 or boxes.shape[0] == 0:
        return counts
    quality = match_quality_matrix(gt_boxes, boxes)  # (G, P)
    for ti, t in enumerate(thresholds):
        used = np.zeros(boxes.shape[0], dtype=bool)
        matched = 0
        for g in range(gt_boxes.shape[0]):
            row = np.where(used, -1.0, quality[g])
            best = int(np.argmax(row))
            if row[best] >= t:
                used[best] = True
                matched += 1
        counts[ti] = matched
    return counts


def average_recall(
    proposal_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    k: int,
    thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS,
) -> RecallReport:
    """Average recall of the top-k proposals over the IoU thresholds."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    num_gts = gt_boxes.shape[0]
    if num_gts == 0:
        return RecallReport(
            k=k,
            num_gts=0,
            thresholds=tuple(thresholds),
            recalls=None,
            ar=None,
            ar_small=None,
            ar_medium=None,
            ar_large=None,
        )
    counts = match_counts(proposal_boxes, gt_boxes, k, thresholds)
    recalls = counts / num_gts
    areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
    size_ars: dict[str, float | None] = {}
    masks = {
        "small": areas < SMALL_AREA,
        "medium": (areas >= SMALL_AREA) & (areas < MEDIUM_AREA),
        "large": areas >= MEDIUM_AREA,
    }
    for name, mask in masks.items():
        if not np.any(mask):
            size_ars[name] = None
            continue
        sub_counts = match_counts(proposal_boxes, gt_boxes[mask], k, thresholds)
        size_ars[name] = float(np.mean(sub_counts / int(mask.sum())))
    return RecallReport(
        k=k,
        num_gts=num_gts,
        thresholds=tuple(thresholds),
        recalls=tuple(float(r) for r in recalls),
        ar=float(np.mean(recalls)),
        ar_small=size_ars["small"],
        ar_medium=size_ars["medium"],
        ar_large=size_ars["large"],
    )


def pooled_average_recall(
    scenes: list[tuple[np.ndarray, np.ndarray]],
    k: int,
    thresholds: tuple[float, ...] = DEFAULT_IOU_THRESHOLDS,
) -> RecallReport:
    """Average recall pooled over (proposal_boxes, gt_boxes) pairs.

    Matching runs per scene; matched and total ground-truth counts are
    accumulated across scenes before the recall division, mirroring
    dataset-level evaluation.
    """
    total = np.zeros(len(thresholds), dtype=np.int64)
    total_size = {name: np.zeros(len(thresholds), dtype=np.int64) for name in ("small", "medium", "large")}
    num_gts = 0
    gts_size = {"small": 0, "medium": 0, "large": 0}
    for proposal_boxes, gt_boxes in scenes:
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        if gt_boxes.shape[0] == 0:
            continue
        num_gts += gt_boxes.shape[0]
        total += match_counts(proposal_boxes, gt_boxes, k, thresholds)
        areas = (gt_boxes[:, 2] - gt_boxes[:, 0]) * (gt_boxes[:, 3] - gt_boxes[:, 1])
        for name, mask in (
            ("small", areas < SMALL_AREA),
            ("medium", (areas >= SMALL_AREA) & (areas < MEDIUM_AREA)),
            ("large", areas >= MEDIUM_AREA),
        ):
            if np.any(mask):
                gts_size[name] += int(mask.sum())
                total_size[name] += match_counts(proposal_boxes, gt_boxes[mask], k, thresholds)
    if num_gts == 0:
        return RecallReport(k, 0, tuple(thresholds), None, None, None, None, None)
    recalls = total / num_gts
    size_ar = {
        name: (float(np.mean(total_size[name] / gts_size[name])) if gts_size[name] else None)
        for name in ("small", "medium", "large")
    }
    return RecallReport(
        k=k,
        num_gts=num_gts,
        thresholds=tuple(thresholds),
        recalls=tuple(float(r) for r in recalls),
        ar=float(np.mean(recalls)),
        ar_small=size_ar["small"],
        ar_medium=size_ar["medium"],
        ar_large=size_ar["large"],
    )


def mean_best_iou(anchor_boxes: np.ndarray, gt_boxes: np.ndarray) -> float:
    """Mean over ground truths of the best overlap any anchor achieves."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0:
        raise ValueError("mean_best_iou requires at least one ground truth box")
    anchor_boxes = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    if anchor_boxes.shape[0] == 0:
        return 0.0
    return float(match_quality_matrix(anchor_boxes, gt_boxes).max(axis=0).mean())


def auc_roc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Exact rank AUC: P(score_pos > score_neg) + 0.5 P(tie).

    Computed in the rank-sum (Mann-Whitney) form with midranks for ties.
    Requires at least one positive and one negative label.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    if scores.shape[0] != labels.shape[0]:
        raise ValueError("scores and labels must have equal length")
    n_pos = int(labels.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc_roc requires both positive and negative labels")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.shape[0], dtype=np.float64)
    # Midranks: equal scores share the mean of the 1-based ranks they span.
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0.0) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [scores.shape[0]]])
    for a, b in zip(starts, ends):
        ranks[order[a:b]] = 0.5 * (a + b + 1)
    rank_sum = ranks[labels].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def centers_inside_labels(anchor_boxes: np.ndarray, gt_boxes: np.ndarray) -> np.ndarray:
    """True where an anchor's center lies inside any ground truth box."""
    a = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if g.shape[0] == 0:
        return np.zeros(a.shape[0], dtype=bool)
    cx = 0.5 * (a[:, 0] + a[:, 2])
    cy = 0.5 * (a[:, 1] + a[:, 3])
    inside = (
        (cx[:, None] >= g[None, :, 0])
        & (cx[:, None] <= g[None, :, 2])
        & (cy[:, None] >= g[None, :, 1])
        & (cy[:, None] <= g[None, :, 3])
    )
    return inside.any(axis=1)


def anchor_separability(
    anchor_boxes: np.ndarray,
    gt_boxes: np.ndarray,
    rule: str = "center_inside",
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> AnchorQualityReport:
    """Score anchors by best overlap and measure positive/negative separation.

    ``rule`` picks the labeling: ``center_inside`` marks anchors whose center
    falls in any ground truth positive; ``threshold_pair`` uses the training
    thresholds and drops the in-between band. (With threshold labels the AUC
    is 1 by construction whenever the bands are disjoint; the center rule is
    the informative default.)
    """
    a = np.asarray(anchor_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if g.shape[0] == 0:
        raise ValueError("anchor_separability requires at least one ground truth box")
    scores = match_quality_matrix(a, g).max(axis=1) if a.shape[0] else np.zeros(0)
    if rule == "center_inside":
        labels = centers_inside_labels(a, g)
        keep = np.ones(a.shape[0], dtype=bool)
    elif rule == "threshold_pair":
        labels = scores > pos_iou
        keep = (scores > pos_iou) | (scores < neg_iou)
    else:
        raise ValueError(f"unknown separability rule {rule!r}")
    return AnchorQualityReport(
        mean_best_iou=mean_best_iou(a, g),
        auc_roc=auc_roc(scores[keep], labels[keep]),
        num_positive=int(labels[keep].sum()),
        num_negative=int(keep.sum() - labels[keep].sum()),
    )
