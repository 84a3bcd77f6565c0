"""Two-pass proposal pipeline: gradient-free anchor augmentation, then
RoI-based refinement with the same head parameters.

The augmentation pass sweeps each head convolutionally over every pyramid
level, decodes its deltas against the on-grid anchors, and keeps a scored,
NMS-thinned pool of augmented anchors. The refinement pass re-runs the same
heads in fully-connected form over RoI-Align patches of those anchors and
re-scores/re-regresses them. Training updates head parameters only through
the refinement path; the augmentation pass contributes no gradients, so a
training step is: augment, append ground-truth-guided anchors, label,
de-duplicate positives, sample, refine forward, loss, backward, SGD.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import head as head_ops
from .geometry import (
    AnchorSpec,
    anchor_grid_boxes,
    clip_boxes_to_image,
    decode_deltas,
    encode_deltas,
    match_quality_matrix,
    nms,
)
from .head import LossConfig, RpnHeadParams
from .tensor import FeaturePyramid, roi_align_many

logger = logging.getLogger(__name__)

LABEL_NEGATIVE = 0
LABEL_POSITIVE = 1
LABEL_IGNORE = -1

ORIGIN_AUGMENTED = 0
ORIGIN_ANCHOR_GUIDED = 1

EM_IOU_FLOOR = 1e-6


@dataclass(frozen=True)
class PipelineConfig:
    """Pipeline settings; defaults follow the standard two-stage setup."""

    kernel_h: int = 3
    kernel_w: int = 3
    dilations: tuple[int, ...] = (2, 4)
    pre_nms_topk: int = 1000
    augment_nms_iou: float = 0.7
    post_nms_keep: int = 2000
    single_stage_selection: bool = False
    final_nms_iou: float | None = None
    final_keep: int = 1000
    pos_iou_threshold: float = 0.7
    neg_iou_threshold: float = 0.3
    minibatch_size: int = 256
    positive_fraction: float = 0.5
    positive_filter_iou: float = 0.7

    def __post_init__(self) -> None:
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if self.kernel_h < 1 or self.kernel_w < 1 or self.kernel_h % 2 == 0 or self.kernel_w % 2 == 0:
            raise ValueError(f"kernel dims must be odd positive, got {self.kernel_h}x{self.kernel_w}")
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ValueError(f"dilations must be non-empty positive integers, got {self.dilations}")
        if not (0.0 < self.neg_iou_threshold < self.pos_iou_threshold <= 1.0):
            raise ValueError(
                "need 0 < neg_iou_threshold < pos_iou_threshold <= 1, got "
                f"{self.neg_iou_threshold} / {self.pos_iou_threshold}"
            )
        for name in ("pre_nms_topk", "post_nms_keep", "final_keep", "minibatch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        for name in ("augment_nms_iou", "positive_filter_iou"):
            if not (0.0 <= getattr(self, name) <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.final_nms_iou is not None and not (0.0 <= self.final_nms_iou <= 1.0):
            raise ValueError("final_nms_iou must lie in [0, 1]")
        if not (0.0 < self.positive_fraction <= 1.0):
            raise ValueError("positive_fraction must lie in (0, 1]")

    @property
    def num_heads(self) -> int:
        return len(self.dilations)

    @property
    def effective_final_nms_iou(self) -> float:
        """Final NMS threshold: 0.6 under single-stage selection, else 0.7."""
        if self.final_nms_iou is not None:
            return self.final_nms_iou
        return 0.6 if self.single_stage_selection else 0.7


@dataclass
class Scene:
    """One image worth of work: dims, ground truth, and its feature pyramid."""

    image_width: int
    image_height: int
    gt_boxes: np.ndarray  # (G, 4)
    features: FeaturePyramid
    gt_crowd: np.ndarray | None = None  # (G,) bool

    def __post_init__(self) -> None:
        self.gt_boxes = np.asarray(self.gt_boxes, dtype=np.float64).reshape(-1, 4)
        if self.gt_crowd is None:
            self.gt_crowd = np.zeros(self.gt_boxes.shape[0], dtype=bool)
        else:
            self.gt_crowd = np.asarray(self.gt_crowd, dtype=bool).reshape(-1)
        if self.gt_crowd.shape[0] != self.gt_boxes.shape[0]:
            raise ValueError("gt_crowd length must match gt_boxes")
        g = self.gt_boxes
        if g.size and (np.any(g[:, 2] <= g[:, 0]) or np.any(g[:, 3] <= g[:, 1])):
            raise ValueError("ground truth boxes must have positive width and height")
        if g.size and (
            np.any(g[:, 0] < 0)
            or np.any(g[:, 1] < 0)
            or np.any(g[:, 2] > self.image_width)
            or np.any(g[:, 3] > self.image_height)
        ):
            raise ValueError("ground truth boxes must lie inside the image")
        if (
            self.features.image_width != self.image_width
            or self.features.image_height != self.image_height
        ):
            raise ValueError("feature pyramid image dims do not match the scene")

    def noncrowd_gts(self) -> np.ndarray:
        return self.gt_boxes[~self.gt_crowd]


@dataclass
class ProposalSet:
    """Scored boxes with their provenance (pyramid level, head, origin)."""

    boxes: np.ndarray  # (N, 4)
    scores: np.ndarray  # (N,)
    level_index: np.ndarray  # (N,) int
    head_index: np.ndarray  # (N,) int
    origin: np.ndarray  # (N,) uint8, ORIGIN_*

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.level_index = np.asarray(self.level_index, dtype=np.int64).reshape(-1)
        self.head_index = np.asarray(self.head_index, dtype=np.int64).reshape(-1)
        self.origin = np.asarray(self.origin, dtype=np.uint8).reshape(-1)
        n = self.boxes.shape[0]
        for name in ("scores", "level_index", "head_index", "origin"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} length does not match boxes")

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def take(self, indices: np.ndarray) -> "ProposalSet":
        return ProposalSet(
            boxes=self.boxes[indices],
            scores=self.scores[indices],
            level_index=self.level_index[indices],
            head_index=self.head_index[indices],
            origin=self.origin[indices],
        )

    def sorted_by_score(self) -> "ProposalSet":
        return self.take(np.argsort(-self.scores, kind="stable"))

    @classmethod
    def empty(cls) -> "ProposalSet":
        return cls(
            boxes=np.zeros((0, 4)),
            scores=np.zeros(0),
            level_index=np.zeros(0, dtype=np.int64),
            head_index=np.zeros(0, dtype=np.int64),
            origin=np.zeros(0, dtype=np.uint8),
        )

    @classmethod
    def concatenate(cls, parts: list["ProposalSet"]) -> "ProposalSet":
        if not parts:
            return cls.empty()
        return cls(
            boxes=np.concatenate([p.boxes for p in parts]),
            scores=np.concatenate([p.scores for p in parts]),
            level_index=np.concatenate([p.level_index for p in parts]),
            head_index=np.concatenate([p.head_index for p in parts]),
            origin=np.concatenate([p.origin for p in parts]),
        )


@dataclass
class GridAnchors:
    """Every on-grid anchor of every head and level, with its conv logit."""

    boxes: np.ndarray  # (N, 4) image coordinates
    scores: np.ndarray  # (N,) objectness logits from the conv sweep
    level_index: np.ndarray  # (N,)
    head_index: np.ndarray  # (N,)

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass
class LossRecord:
    total: float
    cls: float
    reg: float
    num_sampled: int
    num_positive: int


def _check_heads(heads: list[RpnHeadParams], cfg: PipelineConfig) -> None:
    if len(heads) != cfg.num_heads:
        raise ValueError(f"pipeline expects {cfg.num_heads} heads, got {len(heads)}")
    for params in heads:
        if params.kernel != (cfg.kernel_h, cfg.kernel_w):
            raise ValueError(
                f"head kernel {params.kernel} does not match config "
                f"{(cfg.kernel_h, cfg.kernel_w)}"
            )


def level_anchor_spec(cfg: PipelineConfig, head_idx: int, stride: int) -> AnchorSpec:
    return AnchorSpec(cfg.kernel_h, cfg.kernel_w, cfg.dilations[head_idx], stride)


def augment_with_grid(
    scene: Scene, heads: list[RpnHeadParams], cfg: PipelineConfig
) -> tuple[ProposalSet, GridAnchors]:
    """Augmentation pass, also returning the scored hand-designed grid.

    Per head and level: run the conv sweep, decode every cell's delta against
    its on-grid anchor, clip, and keep the per-level top-K by logit. The
    pooled candidates then pass score-greedy NMS (skipped under single-stage
    selection) and are truncated to the top ``post_nms_keep``.
    """
    _check_heads(heads, cfg)
    pyramid = scene.features
    candidates: list[ProposalSet] = []
    grid_parts: list[tuple[np.ndarray, np.ndarray, int, int]] = []
    for hi, params in enumerate(heads):
        dilation = cfg.dilations[hi]
        for li, (fmap, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
            logits, deltas = head_ops.forward_conv(fmap, params, dilation)
            h, w = logits.shape
            spec = level_anchor_spec(cfg, hi, stride)
            anchors = anchor_grid_boxes(spec, h, w)
            flat_logits = logits.reshape(-1)
            flat_deltas = deltas.reshape(4, -1).T
            grid_parts.append((anchors, flat_logits, li, hi))
            k = min(cfg.pre_nms_topk, flat_logits.shape[0])
            top = np.argsort(-flat_logits, kind="stable")[:k]
            boxes = decode_deltas(anchors[top], flat_deltas[top])
            boxes = clip_boxes_to_image(boxes, scene.image_width, scene.image_height)
            candidates.append(
                ProposalSet(
                    boxes=boxes,
                    scores=flat_logits[top],
                    level_index=np.full(k, li, dtype=np.int64),
                    head_index=np.full(k, hi, dtype=np.int64),
                    origin=np.full(k, ORIGIN_AUGMENTED, dtype=np.uint8),
                )
            )
    pooled = ProposalSet.concatenate(candidates).sorted_by_score()
    if cfg.single_stage_selection:
        augmented = pooled.take(np.arange(min(cfg.post_nms_keep, len(pooled))))
    else:
        keep = nms(pooled.boxes, pooled.scores, cfg.augment_nms_iou, max_keep=cfg.post_nms_keep)
        augmented = pooled.take(keep)
    grid = GridAnchors(
        boxes=np.concatenate([p[0] for p in grid_parts]),
        scores=np.concatenate([p[1] for p in grid_parts]),
        level_index=np.concatenate(
            [np.full(p[0].shape[0], p[2], dtype=np.int64) for p in grid_parts]
        ),
        head_index=np.concatenate(
            [np.full(p[0].shape[0], p[3], dtype=np.int64) for p in grid_parts]
        ),
    )
    return augmented, grid


def augment(scene: Scene, heads: list[RpnHeadParams], cfg: PipelineConfig) -> ProposalSet:
    """Gradient-free augmentation: the scored, thinned augmented-anchor pool."""
    augmented, _ = augment_with_grid(scene, heads, cfg)
    return augmented


def anchor_guided_append(
    augmented: ProposalSet, hand_anchors: GridAnchors, gt_boxes: np.ndarray
) -> ProposalSet:
    """Append, per ground truth, its best-IoU hand-designed anchor.

    Ties pick the lowest anchor index; an anchor chosen by several ground
    truths is appended once. Appended rows keep their conv logit as score and
    are marked anchor-guided; the combined set is re-sorted by score.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if gt_boxes.shape[0] == 0 or len(hand_anchors) == 0:
        return augmented
    quality = match_quality_matrix(hand_anchors.boxes, gt_boxes)
    chosen = list(dict.fromkeys(int(i) for i in np.argmax(quality, axis=0)))
    idx = np.asarray(chosen, dtype=np.int64)
    guided = ProposalSet(
        boxes=hand_anchors.boxes[idx],
        scores=hand_anchors.scores[idx],
        level_index=hand_anchors.level_index[idx],
        head_index=hand_anchors.head_index[idx],
        origin=np.full(idx.shape[0], ORIGIN_ANCHOR_GUIDED, dtype=np.uint8),
    )
    return ProposalSet.concatenate([augmented, guided]).sorted_by_score()


def assign_labels(
    boxes: np.ndarray, gt_boxes: np.ndarray, cfg: PipelineConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors by max IoU and return (labels, matched gt index).

    Anchors above ``pos_iou_threshold`` are positive, below
    ``neg_iou_threshold`` negative, the rest ignored. Each ground truth
    additionally forces its own best-overlap anchor positive (when that
    overlap is nonzero), so every reachable ground truth has a training
    anchor. ``matched`` is each anchor's argmax ground truth.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    labels = np.full(n, LABEL_NEGATIVE, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if n == 0 or gt_boxes.shape[0] == 0:
        return labels, matched
    quality = match_quality_matrix(boxes, gt_boxes)
    best = quality.max(axis=1)
    matched = quality.argmax(axis=1)
    labels = np.where(
        best > cfg.pos_iou_threshold,
        LABEL_POSITIVE,
        np.where(best < cfg.neg_iou_threshold, LABEL_NEGATIVE, LABEL_IGNORE),
    ).astype(np.int8)
    per_gt_best = quality.max(axis=0)
    per_gt_arg = quality.argmax(axis=0)
    for j in range(gt_boxes.shape[0]):
        if per_gt_best[j] > 0.0:
            labels[per_gt_arg[j]] = LABEL_POSITIVE
    return labels, matched


def filter_positive_redundancy(
    boxes: np.ndarray,
    labels: np.ndarray,
    gt_boxes: np.ndarray,
    cfg: PipelineConfig,
    exempt: np.ndarray | None = None,
) -> np.ndarray:
    """Thin overlapping positives by greedy NMS scored with IoU-to-gt.

    Positives suppressed by a better-overlapping neighbour become ignored;
    negatives, ignores, and exempt rows pass through untouched.
    """
    labels = np.asarray(labels).copy()
    pos = labels == LABEL_POSITIVE
    if exempt is not None:
        pos = pos & ~np.asarray(exempt, dtype=bool)
    pos_idx = np.flatnonzero(pos)
    if pos_idx.size == 0:
        return labels
    quality = match_quality_matrix(np.asarray(boxes)[pos_idx], gt_boxes)
    scores = quality.max(axis=1) if quality.shape[1] else np.zeros(pos_idx.size)
    kept = nms(np.asarray(boxes)[pos_idx], scores, cfg.positive_filter_iou)
    suppressed = np.setdiff1d(np.arange(pos_idx.size), kept, assume_unique=False)
    labels[pos_idx[suppressed]] = LABEL_IGNORE
    return labels


def sample_minibatch(
    labels: np.ndarray, cfg: PipelineConfig, rng: np.random.Generator
) -> np.ndarray:
    """Sample up to ``minibatch_size`` indices, capped at the positive fraction.

    Draws uniformly without replacement from the positive and negative pools;
    leftover positive quota is backfilled with negatives.
    """
    labels = np.asarray(labels)
    pos_pool = np.flatnonzero(labels == LABEL_POSITIVE)
    neg_pool = np.flatnonzero(labels == LABEL_NEGATIVE)
    if pos_pool.size == 0 and neg_pool.size == 0:
        raise ValueError("cannot sample a minibatch from empty label pools")
    max_pos = int(round(cfg.minibatch_size * cfg.positive_fraction))
    n_pos = min(pos_pool.size, max_pos)
    n_neg = min(neg_pool.size, cfg.minibatch_size - n_pos)
    pos_take = rng.choice(pos_pool, size=n_pos, replace=False) if n_pos else np.zeros(0, np.int64)
    neg_take = rng.choice(neg_pool, size=n_neg, replace=False) if n_neg else np.zeros(0, np.int64)
    return np.concatenate([pos_take, neg_take]).astype(np.int64)


def _extract_patches(
    boxes: np.ndarray,
    level_index: np.ndarray,
    pyramid: FeaturePyramid,
    kernel: tuple[int, int],
) -> np.ndarray:
    """RoI-Align patches for positive-area boxes, flattened to (B, C*m*n).

    Boxes are image-coordinate; division by the source level's stride maps
    them to that level's feature-cell frame.
    """
    m, n = kernel
    num = boxes.shape[0]
    c_in = pyramid.levels[0].shape[0] if len(pyramid) else 0
    out = np.zeros((num, c_in * m * n), dtype=np.float64)
    for li, (fmap, stride) in enumerate(zip(pyramid.levels, pyramid.strides)):
        sel = np.flatnonzero(level_index == li)
        if sel.size == 0:
            continue
        rois = boxes[sel] / float(stride)
        patches = roi_align_many(fmap, rois, m, n)
        out[sel] = patches.reshape(sel.size, -1)
    return out


def refine(anchors: ProposalSet, scene: Scene, heads: list[RpnHeadParams]) -> ProposalSet:
    """Refinement pass: re-score and re-regress each anchor via its RoI patch.

    Every anchor is refined by the head that produced it, on its source
    level, using a kernel-sized RoI-Align patch. Zero-area anchors cannot be
    sampled and are skipped (counted in a debug log); all others map
    one-to-one to output proposals. Output is sorted by refined logit.
    """
    if len(anchors) == 0:
        return anchors
    m, n = heads[0].kernel
    areas = (anchors.boxes[:, 2] - anchors.boxes[:, 0]) * (anchors.boxes[:, 3] - anchors.boxes[:, 1])
    valid = areas > 0.0
    skipped = int(np.count_nonzero(~valid))
    if skipped:
        logger.debug("refine: skipped %d zero-area anchors", skipped)
    live = anchors.take(np.flatnonzero(valid))
    if len(live) == 0:
        return live
    patches = _extract_patches(live.boxes, live.level_index, scene.features, (m, n))
    logits = np.empty(len(live), dtype=np.float64)
    deltas = np.empty((len(live), 4), dtype=np.float64)
    for hi, params in enumerate(heads):
        sel = np.flatnonzero(live.head_index == hi)
        if sel.size == 0:
            continue
        fwd = head_ops.forward_fc_batch(patches[sel], params)
        logits[sel] = fwd.logits
        deltas[sel] = fwd.deltas
    boxes = decode_deltas(live.boxes, deltas)
    boxes = clip_boxes_to_image(boxes, scene.image_width, scene.image_height)
    return ProposalSet(
        boxes=boxes,
        scores=logits,
        level_index=live.level_index,
        head_index=live.head_index,
        origin=live.origin,
    ).sorted_by_score()


@dataclass
class TrainingBatch:
    """Sampled refinement examples with everything backward needs.

    ``delta_targets`` has a row per batch element; only rows with
    ``positive`` set are meaningful.
    """

    boxes: np.ndarray
    level_index: np.ndarray
    head_index: np.ndarray
    positive: np.ndarray
    delta_targets: np.ndarray
    patches: np.ndarray

    def __len__(self) -> int:
        return self.boxes.shape[0]


def prepare_training_batch(
    scene: Scene,
    heads: list[RpnHeadParams],
    cfg: PipelineConfig,
    rng: np.random.Generator,
) -> TrainingBatch | None:
    """Everything in a training step up to the refinement forward.

    Runs augmentation (no gradients), appends guided anchors, labels against
    the non-crowd ground truth, thins redundant positives, samples the
    minibatch, and extracts RoI patches. Returns None when no trainable
    examples exist.
    """
    augmented, grid = augment_with_grid(scene, heads, cfg)
    gts = scene.noncrowd_gts()
    pool = anchor_guided_append(augmented, grid, gts)
    if len(pool) == 0:
        return None
    labels, matched = assign_labels(pool.boxes, gts, cfg)
    areas = (pool.boxes[:, 2] - pool.boxes[:, 0]) * (pool.boxes[:, 3] - pool.boxes[:, 1])
    degenerate = areas <= 0.0
    if np.any(degenerate):
        logger.debug("training pool: ignoring %d zero-area anchors", int(degenerate.sum()))
        labels[degenerate] = LABEL_IGNORE
    labels = filter_positive_redundancy(
        pool.boxes, labels, gts, cfg, exempt=pool.origin == ORIGIN_ANCHOR_GUIDED
    )
    if not np.any(labels != LABEL_IGNORE):
        return None
    sampled = sample_minibatch(labels, cfg, rng)
    batch = pool.take(sampled)
    positive = labels[sampled] == LABEL_POSITIVE
    delta_targets = np.zeros((len(batch), 4), dtype=np.float64)
    if np.any(positive):
        pos_rows = np.flatnonzero(positive)
        delta_targets[pos_rows] = encode_deltas(
            batch.boxes[pos_rows], gts[matched[sampled][pos_rows]]
        )
    patches = _extract_patches(
        batch.boxes, batch.level_index, scene.features, heads[0].kernel
    )
    return TrainingBatch(
        boxes=batch.boxes,
        level_index=batch.level_index,
        head_index=batch.head_index,
        positive=positive,
        delta_targets=delta_targets,
        patches=patches,
    )


def training_losses_and_gradients(
    batch: TrainingBatch,
    heads: list[RpnHeadParams],
    loss_cfg: LossConfig,
) -> tuple[LossRecord, list[head_ops.HeadGradients]]:
    """Refinement forward, loss, and per-head analytic gradients.

    Losses are normalized by the full batch size, so per-head gradient
    shards combine into exactly the joint-batch gradient.
    """
    total_n = len(batch)
    all_logits = np.empty(total_n, dtype=np.float64)
    all_deltas = np.empty((total_n, 4), dtype=np.float64)
    grads: list[head_ops.HeadGradients] = []
    for hi, params in enumerate(heads):
        sel = np.flatnonzero(batch.head_index == hi)
        if sel.size == 0:
            grads.append(head_ops.HeadGradients.zeros_like(params))
            continue
        fwd = head_ops.forward_fc_batch(batch.patches[sel], params)
        all_logits[sel] = fwd.logits
        all_deltas[sel] = fwd.deltas
        pos = batch.positive[sel]
        grads.append(
            head_ops.backward(
                fwd,
                pos,
                batch.delta_targets[sel][pos],
                loss_cfg,
                params,
                num_examples=total_n,
            )
        )
    breakdown = head_ops.loss(
        all_logits,
        all_deltas,
        batch.positive,
        batch.delta_targets[batch.positive],
        loss_cfg,
    )
    record = LossRecord(
        total=breakdown.total,
        cls=breakdown.cls,
        reg=breakdown.reg,
        num_sampled=total_n,
        num_positive=int(batch.positive.sum()),
    )
    return record, grads


def train_step(
    scene: Scene,
    heads: list[RpnHeadParams],
    cfg: PipelineConfig,
    epsilon: float,
    rng: np.random.Generator,
    loss_cfg: LossConfig | None = None,
) -> LossRecord | None:
    """One full training step; updates ``heads`` in place.

    Returns the loss record, or None when the scene yields no trainable
    examples (the step is skipped with a log line).
    """
    loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
    batch = prepare_training_batch(scene, heads, cfg, rng)
    if batch is None or len(batch) == 0:
        logger.debug("train_step: no sampled examples, skipping scene")
        return None
    record, grads = training_losses_and_gradients(batch, heads, loss_cfg)
    for hi in range(len(heads)):
        heads[hi] = head_ops.sgd_step(heads[hi], grads[hi], epsilon)
    return record


def infer(scene: Scene, heads: list[RpnHeadParams], cfg: PipelineConfig) -> ProposalSet:
    """Full inference: augment, refine, final NMS, keep the top proposals."""
    augmented = augment(scene, heads, cfg)
    proposals = refine(augmented, scene, heads)
    if len(proposals) == 0:
        return proposals
    keep = nms(
        proposals.boxes,
        proposals.scores,
        cfg.effective_final_nms_iou,
        max_keep=cfg.final_keep,
    )
    return proposals.take(keep)


def em_elbo_diagnostic(scene: Scene, heads: list[RpnHeadParams], cfg: PipelineConfig) -> float:
    """Mean log best-overlap of proposals against ground truth.

    For each non-crowd ground truth, takes its best IoU over the inferred
    proposals, floors it at 1e-6, and averages the logs. A monotone proxy
    for proposal likelihood: 0 means every ground truth is matched exactly.
    """
    gts = scene.noncrowd_gts()
    if gts.shape[0] == 0:
        raise ValueError("em_elbo_diagnostic requires at least one ground truth box")
    proposals = infer(scene, heads, cfg)
    if len(proposals) == 0:
        best = np.zeros(gts.shape[0])
    else:
        best = match_quality_matrix(proposals.boxes, gts).max(axis=0)
    return float(np.mean(np.log(np.maximum(best, EM_IOU_FLOOR))))
