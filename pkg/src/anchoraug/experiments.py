"""Experiment drivers behind the CLI: training, evaluation, anchor statistics.

Every run is fully determined by (config, seed): scene generation, head
initialization, and minibatch sampling draw from separate child streams of
one seed sequence, and metrics documents are emitted with a stable key order
so byte-level comparison works (the timestamp line is excluded from the
digest).
"""

from __future__ import annotations

import hashlib
import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import pipeline as pl
from .annotations import AnnotationSet, load_coco_annotations
from .config import ExperimentConfig, config_digest
from .fsio import atomic_write_text
from .geometry import AnchorSpec, anchor_grid_boxes, match_quality_matrix
from .head import RpnHeadParams, load_checkpoint, save_checkpoint
from .metrics import auc_roc, centers_inside_labels, pooled_average_recall
from .pipeline import PipelineConfig, Scene
from .synthetic import generate_synthetic_scene

FORMAT_TAG = "anchoraug-metrics-v1"


class MetricsDocument:
    """Ordered key/value text document with a timestamp-independent digest."""

    def __init__(self) -> None:
        self._entries: list[tuple[str, str]] = [("format", FORMAT_TAG)]

    def set(self, key: str, value) -> None:
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        elif value is None:
            text = "none"
        else:
            text = str(value)
        self._entries.append((key, text))

    def get(self, key: str) -> str:
        for k, v in self._entries:
            if k == key:
                return v
        raise KeyError(key)

    def get_float(self, key: str) -> float:
        return float(self.get(key))

    def to_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self._entries) + "\n"

    def digest(self) -> str:
        stable = "\n".join(f"{k} = {v}" for k, v in self._entries if k != "timestamp")
        return hashlib.sha256(stable.encode("utf-8")).hexdigest()

    def write(self, path) -> None:
        atomic_write_text(path, self.to_text())


def _streams(cfg: ExperimentConfig) -> dict[str, np.random.Generator]:
    children = np.random.SeedSequence(cfg.seed).spawn(4)
    names = ("train_scenes", "eval_scenes", "head_init", "sampler")
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def build_scenes(cfg: ExperimentConfig) -> tuple[list[Scene], list[Scene]]:
    streams = _streams(cfg)
    train = [generate_synthetic_scene(streams["train_scenes"], cfg) for _ in range(cfg.num_train_scenes)]
    evals = [generate_synthetic_scene(streams["eval_scenes"], cfg) for _ in range(cfg.num_eval_scenes)]
    return train, evals


def init_heads(cfg: ExperimentConfig) -> list[RpnHeadParams]:
    rng = _streams(cfg)["head_init"]
    return [
        RpnHeadParams.initialize(
            cfg.feature_channels,
            cfg.hidden_channels,
            rng,
            kernel=(cfg.pipeline.kernel_h, cfg.pipeline.kernel_w),
        )
        for _ in cfg.pipeline.dilations
    ]


def zero_heads(cfg: ExperimentConfig) -> list[RpnHeadParams]:
    return [
        RpnHeadParams.zeros(
            cfg.feature_channels,
            cfg.hidden_channels,
            kernel=(cfg.pipeline.kernel_h, cfg.pipeline.kernel_w),
        )
        for _ in cfg.pipeline.dilations
    ]


def hand_anchor_boxes(scene: Scene, cfg: PipelineConfig) -> np.ndarray:
    """Every on-grid anchor box of every head and level for this scene."""
    parts = []
    for hi in range(cfg.num_heads):
        for fmap, stride in zip(scene.features.levels, scene.features.strides):
            spec = pl.level_anchor_spec(cfg, hi, stride)
            parts.append(anchor_grid_boxes(spec, fmap.shape[1], fmap.shape[2]))
    return np.concatenate(parts)


@dataclass
class AnchorQualitySummary:
    mean_best_iou: float
    separability_auc: float
    num_positive: int
    num_negative: int


def _pooled_anchor_quality(
    per_scene: list[tuple[np.ndarray, np.ndarray]]
) -> AnchorQualitySummary:
    """Anchor quality pooled over (anchor_boxes, gt_boxes) pairs."""
    best: list[np.ndarray] = []
    scores: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for anchors, gts in per_scene:
        if gts.shape[0] == 0:
            continue
        quality = match_quality_matrix(anchors, gts)
        best.append(quality.max(axis=0))
        scores.append(quality.max(axis=1))
        labels.append(centers_inside_labels(anchors, gts))
    if not best:
        raise ValueError("anchor quality needs at least one ground truth box")
    all_scores = np.concatenate(scores)
    all_labels = np.concatenate(labels)
    return AnchorQualitySummary(
        mean_best_iou=float(np.concatenate(best).mean()),
        separability_auc=auc_roc(all_scores, all_labels),
        num_positive=int(all_labels.sum()),
        num_negative=int((~all_labels).sum()),
    )


def _mean_em(scenes: list[Scene], heads: list[RpnHeadParams], cfg: ExperimentConfig) -> float:
    values = [
        pl.em_elbo_diagnostic(s, heads, cfg.pipeline)
        for s in scenes
        if s.noncrowd_gts().shape[0] > 0
    ]
    if not values:
        raise ValueError("no evaluation scene has ground truth boxes")
    return float(np.mean(values))


def _recall_entries(
    doc: MetricsDocument,
    prefix: str,
    scenes: list[Scene],
    heads: list[RpnHeadParams],
    cfg: ExperimentConfig,
) -> None:
    pairs = [(pl.infer(s, heads, cfg.pipeline).boxes, s.noncrowd_gts()) for s in scenes]
    for k in (100, 1000):
        report = pooled_average_recall(pairs, k)
        doc.set(f"{prefix}ar{k}", report.ar)
        if k == 100:
            doc.set(f"{prefix}ar{k}_small", report.ar_small)
            doc.set(f"{prefix}ar{k}_medium", report.ar_medium)
            doc.set(f"{prefix}ar{k}_large", report.ar_large)


def _em_checkpoints(iterations: int) -> list[int]:
    if iterations <= 0:
        return [0]
    marks = {0, iterations // 4, iterations // 2, (3 * iterations) // 4, iterations}
    return sorted(marks)


@dataclass
class TrainResult:
    document: MetricsDocument
    heads: list[RpnHeadParams]
    loss_curve: list[pl.LossRecord | None]
    em_curve: dict[int, float]


def run_training(cfg: ExperimentConfig, out_dir=None) -> TrainResult:
    """Train on seeded synthetic scenes and report quality metrics.

    Writes ``metrics.txt`` and ``checkpoint.bin`` into ``out_dir`` when
    given. Aborts on a non-finite loss.
    """
    train_scenes, eval_scenes = build_scenes(cfg)
    heads = init_heads(cfg)
    sampler = _streams(cfg)["sampler"]
    em_marks = _em_checkpoints(cfg.iterations)
    em_curve: dict[int, float] = {}
    if 0 in em_marks:
        em_curve[0] = _mean_em(eval_scenes, heads, cfg)
    loss_curve: list[pl.LossRecord | None] = []
    skipped = 0
    for i in range(cfg.iterations):
        scene = train_scenes[i % len(train_scenes)]
        record = pl.train_step(
            scene, heads, cfg.pipeline, cfg.learning_rate, sampler, cfg.loss
        )
        if record is None:
            skipped += 1
        elif not math.isfinite(record.total):
            raise RuntimeError(
                f"non-finite loss at iteration {i}: total={record.total!r} "
                f"(cls={record.cls!r}, reg={record.reg!r})"
            )
        loss_curve.append(record)
        if (i + 1) in em_marks:
            em_curve[i + 1] = _mean_em(eval_scenes, heads, cfg)

    doc = MetricsDocument()
    doc.set("command", "train")
    doc.set("timestamp", time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    doc.set("seed", cfg.seed)
    doc.set("config_digest", config_digest(cfg))
    doc.set("iterations", cfg.iterations)
    doc.set("num_train_scenes", len(train_scenes))
    doc.set("num_eval_scenes", len(eval_scenes))
    doc.set("skipped_steps", skipped)
    first = next((r for r in loss_curve if r is not None), None)
    last = next((r for r in reversed(loss_curve) if r is not None), None)
    doc.set("loss_first_total", None if first is None else first.total)
    doc.set("loss_final_total", None if last is None else last.total)
    for mark in sorted(em_curve):
        doc.set(f"em_{mark:05d}", em_curve[mark])
    _recall_entries(doc, "", eval_scenes, heads, cfg)
    _recall_entries(doc, "baseline_", eval_scenes, zero_heads(cfg), cfg)
    hand = _pooled_anchor_quality(
        [(hand_anchor_boxes(s, cfg.pipeline), s.noncrowd_gts()) for s in eval_scenes]
    )
    augmented = _pooled_anchor_quality(
        [(pl.augment(s, heads, cfg.pipeline).boxes, s.noncrowd_gts()) for s in eval_scenes]
    )
    for name, summary in (("hand", hand), ("augmented", augmented)):
        doc.set(f"{name}_mean_best_iou", summary.mean_best_iou)
        doc.set(f"{name}_separability_auc", summary.separability_auc)
        doc.set(f"{name}_separability_pos", summary.num_positive)
        doc.set(f"{name}_separability_neg", summary.num_negative)
    for i, record in enumerate(loss_curve):
        if record is None:
            doc.set(f"loss_{i:05d}", "skipped")
        else:
            doc.set(f"loss_{i:05d}", f"{record.total!r} {record.cls!r} {record.reg!r}")

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        doc.write(os.path.join(out_dir, "metrics.txt"))
        ckpt = os.path.join(out_dir, "checkpoint.bin")
        save_checkpoint(ckpt + ".tmp", heads)
        os.replace(ckpt + ".tmp", ckpt)
    return TrainResult(document=doc, heads=heads, loss_curve=loss_curve, em_curve=em_curve)


def load_heads_for_config(path, cfg: ExperimentConfig) -> list[RpnHeadParams]:
    heads = load_checkpoint(path)
    if len(heads) != cfg.pipeline.num_heads:
        raise ValueError(
            f"checkpoint holds {len(heads)} heads, config expects {cfg.pipeline.num_heads}"
        )
    for params in heads:
        if params.in_channels != cfg.feature_channels or params.kernel != (
            cfg.pipeline.kernel_h,
            cfg.pipeline.kernel_w,
        ):
            raise ValueError("checkpoint head shapes do not match the config")
    return heads


def run_eval(cfg: ExperimentConfig, checkpoint_path, out_dir=None) -> MetricsDocument:
    """Evaluate a checkpoint on the held-out synthetic split."""
    heads = load_heads_for_config(checkpoint_path, cfg)
    _, eval_scenes = build_scenes(cfg)
    doc = MetricsDocument()
    doc.set("command", "eval")
    doc.set("timestamp", time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    doc.set("seed", cfg.seed)
    doc.set("config_digest", config_digest(cfg))
    with open(checkpoint_path, "rb") as f:
        doc.set("checkpoint_digest", hashlib.sha256(f.read()).hexdigest())
    doc.set("num_eval_scenes", len(eval_scenes))
    _recall_entries(doc, "", eval_scenes, heads, cfg)
    _recall_entries(doc, "baseline_", eval_scenes, zero_heads(cfg), cfg)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        doc.write(os.path.join(out_dir, "metrics.txt"))
    return doc


def anchor_stats_specs(cfg: ExperimentConfig) -> list[AnchorSpec]:
    return [
        AnchorSpec(cfg.pipeline.kernel_h, cfg.pipeline.kernel_w, d, s)
        for d in cfg.pipeline.dilations
        for s in cfg.strides
    ]


def _grid_for_image(spec: AnchorSpec, width: int, height: int) -> np.ndarray:
    grid_h = -(-height // spec.stride)
    grid_w = -(-width // spec.stride)
    return anchor_grid_boxes(spec, grid_h, grid_w)


def run_anchor_stats(cfg: ExperimentConfig, annotations_path, out_dir=None) -> MetricsDocument:
    """Hand-designed anchor quality over an annotation file, no network.

    For each configured (dilation, stride) spec, and for all specs pooled,
    reports mean best-overlap and center-inside separability of the
    per-image anchor grid against the non-crowd ground truth.
    """
    annotations = load_coco_annotations(annotations_path)
    images = sorted(annotations.images, key=lambda im: im.id)
    total_gts = sum(
        annotations.boxes_for_image(im.id).shape[0] for im in images
    )
    if total_gts == 0:
        raise ValueError(f"{annotations_path}: no usable (non-crowd) ground truth boxes")

    doc = MetricsDocument()
    doc.set("command", "anchor-stats")
    doc.set("timestamp", time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))
    doc.set("seed", cfg.seed)
    doc.set("config_digest", config_digest(cfg))
    doc.set("annotations_file", os.path.basename(str(annotations_path)))
    doc.set("num_images", len(images))
    doc.set("num_gts", total_gts)

    specs = anchor_stats_specs(cfg)
    per_image_gts = {im.id: annotations.boxes_for_image(im.id) for im in images}
    combined: list[tuple[np.ndarray, np.ndarray]] = []
    for im in images:
        anchors = np.concatenate([_grid_for_image(spec, im.width, im.height) for spec in specs])
        combined.append((anchors, per_image_gts[im.id]))
    for spec in specs:
        pairs = [
            (_grid_for_image(spec, im.width, im.height), per_image_gts[im.id]) for im in images
        ]
        summary = _pooled_anchor_quality(pairs)
        prefix = f"spec_d{spec.dilation}_s{spec.stride}"
        doc.set(f"{prefix}_mean_best_iou", summary.mean_best_iou)
        doc.set(f"{prefix}_separability_auc", summary.separability_auc)
        doc.set(f"{prefix}_separability_pos", summary.num_positive)
        doc.set(f"{prefix}_separability_neg", summary.num_negative)
    summary = _pooled_anchor_quality(combined)
    doc.set("combined_mean_best_iou", summary.mean_best_iou)
    doc.set("combined_separability_auc", summary.separability_auc)
    doc.set("combined_separability_pos", summary.num_positive)
    doc.set("combined_separability_neg", summary.num_negative)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        doc.write(os.path.join(out_dir, "metrics.txt"))
    return doc


def render_stages(cfg: ExperimentConfig, heads: list[RpnHeadParams] | None, out_path) -> None:
    """Render the first evaluation scene's stages to an SVG file.

    The hand-anchor panel shows each ground truth's best-overlap hand
    anchor; the other panels show the top 100 augmented anchors and
    proposals.
    """
    from .render import render_scene_svg

    _, eval_scenes = build_scenes(cfg)
    scene = eval_scenes[0]
    if heads is None:
        heads = init_heads(cfg)
    augmented, grid = pl.augment_with_grid(scene, heads, cfg.pipeline)
    gts = scene.noncrowd_gts()
    if gts.shape[0] and len(grid):
        quality = match_quality_matrix(grid.boxes, gts)
        chosen = list(dict.fromkeys(int(i) for i in np.argmax(quality, axis=0)))
        hand = grid.boxes[np.asarray(chosen, dtype=np.int64)]
    else:
        hand = np.zeros((0, 4))
    proposals = pl.infer(scene, heads, cfg.pipeline)
    render_scene_svg(
        scene,
        hand,
        augmented.boxes[:100],
        proposals.boxes[:100],
        out_path,
    )
