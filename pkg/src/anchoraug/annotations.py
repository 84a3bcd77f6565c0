"""COCO-layout annotation ingestion (the ``images``/``annotations`` subset).

Only geometry is loaded: image dims and ``[x, y, width, height]`` boxes,
converted to corner form. Crowd-flagged annotations are kept but marked;
zero-area boxes are dropped at load.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class ImageInfo:
    id: int
    width: int
    height: int


@dataclass(frozen=True)
class Annotation:
    image_id: int
    x1: float
    y1: float
    x2: float
    y2: float
    crowd: bool
    category_id: int

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass
class AnnotationSet:
    images: list[ImageInfo]
    annotations: list[Annotation]

    def image_by_id(self, image_id: int) -> ImageInfo:
        for info in self.images:
            if info.id == image_id:
                return info
        raise KeyError(image_id)

    def boxes_for_image(self, image_id: int, include_crowd: bool = False) -> np.ndarray:
        rows = [
            a.to_array()
            for a in self.annotations
            if a.image_id == image_id and (include_crowd or not a.crowd)
        ]
        return np.stack(rows) if rows else np.zeros((0, 4), dtype=np.float64)

    def __len__(self) -> int:
        return len(self.annotations)


def _require(mapping: dict, key: str, context: str):
    if key not in mapping:
        raise AnnotationError(f"{context}: missing required field {key!r}")
    return mapping[key]


def load_coco_annotations(path) -> AnnotationSet:
    """Load an annotation document, converting boxes to corner coordinates.

    Raises :class:`AnnotationError` on malformed documents and on
    annotations referencing an unknown image id.
    """
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as exc:
        raise AnnotationError(f"{path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise AnnotationError(f"{path}: document must be a JSON object")

    images = []
    known_ids = set()
    for i, entry in enumerate(doc.get("images", [])):
        context = f"{path}: images[{i}]"
        if not isinstance(entry, dict):
            raise AnnotationError(f"{context}: must be an object")
        try:
            info = ImageInfo(
                id=int(_require(entry, "id", context)),
                width=int(_require(entry, "width", context)),
                height=int(_require(entry, "height", context)),
            )
        except (TypeError, ValueError) as exc:
            raise AnnotationError(f"{context}: {exc}") from None
        if info.width < 1 or info.height < 1:
            raise AnnotationError(f"{context}: non-positive image dims")
        if info.id in known_ids:
            raise AnnotationError(f"{context}: duplicate image id {info.id}")
        known_ids.add(info.id)
        images.append(info)

    annotations = []
    dropped = 0
    for i, entry in enumerate(doc.get("annotations", [])):
        context = f"{path}: annotations[{i}]"
        if not isinstance(entry, dict):
            raise AnnotationError(f"{context}: must be an object")
        image_id = int(_require(entry, "image_id", context))
        if image_id not in known_ids:
            raise AnnotationError(f"{context}: references unknown image id {image_id}")
        bbox = _require(entry, "bbox", context)
        if not isinstance(bbox, (list, tuple)) or len(bbox) != 4:
            raise AnnotationError(f"{context}: bbox must be [x, y, width, height]")
        x, y, w, h = (float(v) for v in bbox)
        if w <= 0.0 or h <= 0.0:
            dropped += 1
            continue
        annotations.append(
            Annotation(
                image_id=image_id,
                x1=x,
                y1=y,
                x2=x + w,
                y2=y + h,
                crowd=bool(entry.get("iscrowd", 0)),
                category_id=int(entry.get("category_id", 0)),
            )
        )
    if dropped:
        logger.debug("load_coco_annotations: dropped %d zero-area boxes", dropped)
    return AnnotationSet(images=images, annotations=annotations)
