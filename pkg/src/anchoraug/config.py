"""Experiment configuration: a line-oriented ``key = value`` text format.

Blank lines and ``#`` comments are ignored. Every key is optional; omitted
keys take the documented defaults (dilations 2,4; loss weight 5; top-2000
keep; 0.7/0.3 label thresholds; strides 4,8,16,32). Unknown keys, malformed
values, and constraint violations raise :class:`ConfigError` naming the file
and line.

Recognized keys, their types, and defaults are listed in ``KEY_TABLE``;
``dump_config`` writes them all back in a fixed order, so dump/load is an
identity on configs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import Callable

from .head import LossConfig
from .pipeline import PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs: pipeline, loss, data generation, training."""

    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    image_size: int = 256
    strides: tuple[int, ...] = (4, 8, 16, 32)
    feature_channels: int = 8
    hidden_channels: int = 64
    num_train_scenes: int = 64
    num_eval_scenes: int = 16
    boxes_min: int = 2
    boxes_max: int = 6
    gt_size_min: float = 16.0
    gt_size_max: float = 96.0
    gt_aspect_min: float = 0.5
    gt_aspect_max: float = 2.0
    projection_seed: int = 7
    iterations: int = 500
    learning_rate: float = 0.2
    momentum: float = 0.0
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if any(s < 1 for s in self.strides) or any(
            b <= a for a, b in zip(self.strides, self.strides[1:])
        ):
            raise ValueError(f"strides must be positive and strictly increasing, got {self.strides}")
        if self.image_size < max(self.strides):
            raise ValueError("image_size must be at least the largest stride")
        for name in ("feature_channels", "hidden_channels", "num_train_scenes", "num_eval_scenes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (0 <= self.boxes_min <= self.boxes_max):
            raise ValueError("need 0 <= boxes_min <= boxes_max")
        if not (0 < self.gt_size_min <= self.gt_size_max):
            raise ValueError("need 0 < gt_size_min <= gt_size_max")
        if not (0 < self.gt_aspect_min <= self.gt_aspect_max):
            raise ValueError("need 0 < gt_aspect_min <= gt_aspect_max")
        if self.iterations < 0 or self.seed < 0:
            raise ValueError("iterations and seed must be non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not (0.0 <= self.momentum < 1.0):
            raise ValueError("momentum must lie in [0, 1)")


def _parse_int(text: str) -> int:
    return int(text)


def _parse_float(text: str) -> float:
    return float(text)


def _parse_bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    raise ValueError(f"expected true or false, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(part.strip()) for part in text.split(","))


def _parse_optional_float(text: str) -> float | None:
    return None if text.lower() == "auto" else float(text)


def _parse_str(text: str) -> str:
    return text


@dataclass(frozen=True)
class _Key:
    section: str  # "root" | "pipeline" | "loss"
    attr: str
    parse: Callable[[str], object]
    fmt: Callable[[object], str] = staticmethod(lambda v: str(v))


def _fmt_bool(v: object) -> str:
    return "true" if v else "false"


def _fmt_tuple(v: object) -> str:
    return ",".join(str(x) for x in v)  # type: ignore[union-attr]


def _fmt_optional(v: object) -> str:
    return "auto" if v is None else repr(float(v))  # type: ignore[arg-type]


def _fmt_float(v: object) -> str:
    return repr(float(v))  # type: ignore[arg-type]


KEY_TABLE: dict[str, _Key] = {
    "seed": _Key("root", "seed", _parse_int),
    "image_size": _Key("root", "image_size", _parse_int),
    "strides": _Key("root", "strides", _parse_int_tuple, _fmt_tuple),
    "feature_channels": _Key("root", "feature_channels", _parse_int),
    "hidden_channels": _Key("root", "hidden_channels", _parse_int),
    "num_train_scenes": _Key("root", "num_train_scenes", _parse_int),
    "num_eval_scenes": _Key("root", "num_eval_scenes", _parse_int),
    "boxes_min": _Key("root", "boxes_min", _parse_int),
    "boxes_max": _Key("root", "boxes_max", _parse_int),
    "gt_size_min": _Key("root", "gt_size_min", _parse_float, _fmt_float),
    "gt_size_max": _Key("root", "gt_size_max", _parse_float, _fmt_float),
    "gt_aspect_min": _Key("root", "gt_aspect_min", _parse_float, _fmt_float),
    "gt_aspect_max": _Key("root", "gt_aspect_max", _parse_float, _fmt_float),
    "projection_seed": _Key("root", "projection_seed", _parse_int),
    "iterations": _Key("root", "iterations", _parse_int),
    "learning_rate": _Key("root", "learning_rate", _parse_float, _fmt_float),
    "momentum": _Key("root", "momentum", _parse_float, _fmt_float),
    "output_dir": _Key("root", "output_dir", _parse_str),
    "kernel_h": _Key("pipeline", "kernel_h", _parse_int),
    "kernel_w": _Key("pipeline", "kernel_w", _parse_int),
    "dilations": _Key("pipeline", "dilations", _parse_int_tuple, _fmt_tuple),
    "pre_nms_topk": _Key("pipeline", "pre_nms_topk", _parse_int),
    "augment_nms_iou": _Key("pipeline", "augment_nms_iou", _parse_float, _fmt_float),
    "post_nms_keep": _Key("pipeline", "post_nms_keep", _parse_int),
    "single_stage_selection": _Key("pipeline", "single_stage_selection", _parse_bool, _fmt_bool),
    "final_nms_iou": _Key("pipeline", "final_nms_iou", _parse_optional_float, _fmt_optional),
    "final_keep": _Key("pipeline", "final_keep", _parse_int),
    "pos_iou_threshold": _Key("pipeline", "pos_iou_threshold", _parse_float, _fmt_float),
    "neg_iou_threshold": _Key("pipeline", "neg_iou_threshold", _parse_float, _fmt_float),
    "minibatch_size": _Key("pipeline", "minibatch_size", _parse_int),
    "positive_fraction": _Key("pipeline", "positive_fraction", _parse_float, _fmt_float),
    "positive_filter_iou": _Key("pipeline", "positive_filter_iou", _parse_float, _fmt_float),
    "lambda": _Key("loss", "lam", _parse_float, _fmt_float),
    "beta": _Key("loss", "beta", _parse_float, _fmt_float),
}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    sections: dict[str, dict[str, object]] = {"root": {}, "pipeline": {}, "loss": {}}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (part.strip() for part in line.partition("="))
        if key not in KEY_TABLE:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in lines:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first at line {lines[key]})")
        spec = KEY_TABLE[key]
        try:
            parsed = spec.parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        sections[spec.section][spec.attr] = parsed
        lines[key] = lineno

    def located(section: str, exc: Exception) -> ConfigError:
        for key, spec in KEY_TABLE.items():
            if spec.section == section and key in lines:
                return ConfigError(f"{source}:{lines[key]}: {exc}")
        return ConfigError(f"{source}: {exc}")

    try:
        pipeline = PipelineConfig(**sections["pipeline"])  # type: ignore[arg-type]
    except ValueError as exc:
        raise located("pipeline", exc) from None
    try:
        loss = LossConfig(**sections["loss"])  # type: ignore[arg-type]
    except ValueError as exc:
        raise located("loss", exc) from None
    try:
        return ExperimentConfig(pipeline=pipeline, loss=loss, **sections["root"])  # type: ignore[arg-type]
    except ValueError as exc:
        raise located("root", exc) from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config_text(text, source=str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form covering every key, in table order."""
    parts = []
    for key, spec in KEY_TABLE.items():
        holder = {"root": cfg, "pipeline": cfg.pipeline, "loss": cfg.loss}[spec.section]
        parts.append(f"{key} = {spec.fmt(getattr(holder, spec.attr))}")
    return "\n".join(parts) + "\n"


def config_digest(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()
