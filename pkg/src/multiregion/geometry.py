"""Boxes, IoU, the ten candidate-relative regions, and box regression targets.

Boxes live in continuous pixel coordinates ``(x1, y1, x2, y2)`` with
``width = x2 - x1`` (no ``+1`` pixel convention). Rasterization only happens
when a box is projected onto a feature map (see :mod:`multiregion.featmap`).

Scalar helpers take :class:`BoundingBox` values; the ``*_boxes`` variants take
``(N, 4)`` arrays and are what the pipeline uses internally.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError, InvalidBoxError


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )
        if not all(math.isfinite(v) for v in (self.x1, self.y1, self.x2, self.y2)):
            raise InvalidBoxError("box coordinates must be finite")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def contains(self, other: "BoundingBox") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and other.x2 <= self.x2
            and other.y2 <= self.y2
        )

    @classmethod
    def from_array(cls, arr, class_id=None, score=None) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2, class_id=class_id, score=score)


def as_box_array(boxes) -> np.ndarray:
    """Coerce boxes (array-like or list of BoundingBox) into a contiguous (N, 4) float64 array."""
    if isinstance(boxes, BoundingBox):
        return boxes.as_array()[None, :]
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], BoundingBox):
        return np.array([b.as_array() for b in boxes], dtype=np.float64)
    arr = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64))
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return arr.reshape(-1, 4)


def validate_boxes(boxes: np.ndarray) -> None:
    if boxes.size and not (
        np.all(boxes[:, 2] > boxes[:, 0]) and np.all(boxes[:, 3] > boxes[:, 1])
    ):
        bad = int(np.flatnonzero((boxes[:, 2] <= boxes[:, 0]) | (boxes[:, 3] <= boxes[:, 1]))[0])
        raise InvalidBoxError(f"degenerate box at index {bad}: {boxes[bad].tolist()}")


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two valid boxes; 0.0 when they are disjoint."""
    for box in (a, b):
        if not (box.x2 > box.x1 and box.y2 > box.y1):
            raise InvalidBoxError(f"degenerate box {box}")
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box sets, shape ``(len(a), len(b))``."""
    a = as_box_array(a)
    b = as_box_array(b)
    validate_boxes(a)
    validate_boxes(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    return _kernels.iou_matrix(a, b)


# ---------------------------------------------------------------------------
# Scaling
# ---------------------------------------------------------------------------


def scale_boxes(boxes: np.ndarray, factor: float) -> np.ndarray:
    """Center-preserving scaling of width and height by ``factor``."""
    boxes = as_box_array(boxes)
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    hw = 0.5 * factor * (boxes[:, 2] - boxes[:, 0])
    hh = 0.5 * factor * (boxes[:, 3] - boxes[:, 1])
    return np.stack([cx - hw, cy - hh, cx + hw, cy + hh], axis=1)


def enlarge(candidate: BoundingBox, factor: float) -> BoundingBox:
    if not factor > 0:
        raise InvalidArgumentError(f"enlargement factor must be positive, got {factor}")
    x1, y1, x2, y2 = scale_boxes(candidate.as_array(), factor)[0]
    return BoundingBox(float(x1), float(y1), float(x2), float(y2),
                       class_id=candidate.class_id, score=candidate.score)


def enlarge_boxes(boxes, factor: float) -> np.ndarray:
    if not factor > 0:
        raise InvalidArgumentError(f"enlargement factor must be positive, got {factor}")
    return scale_boxes(boxes, factor)


# ---------------------------------------------------------------------------
# Region geometry
# ---------------------------------------------------------------------------


class RegionKind(str, enum.Enum):
    RECT = "rect"
    HALF_LEFT = "half_left"
    HALF_RIGHT = "half_right"
    HALF_UP = "half_up"
    HALF_BOTTOM = "half_bottom"
    RING = "ring"


@dataclass(frozen=True)
class RegionSpec:
    """A region defined relative to a candidate box.

    ``outer_scale`` scales the candidate about its center; half-box kinds then
    keep one half of the scaled box. Rings additionally carry ``inner_scale``,
    the factor for the masked-out inner box.
    """

    kind: RegionKind
    outer_scale: float = 1.0
    inner_scale: float = 0.0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", RegionKind(self.kind))
        if not self.outer_scale > 0:
            raise InvalidArgumentError(f"outer_scale must be > 0, got {self.outer_scale}")
        if self.kind is RegionKind.RING:
            if not 0 <= self.inner_scale < self.outer_scale:
                raise InvalidArgumentError(
                    f"ring needs 0 <= inner_scale < outer_scale, got "
                    f"{self.inner_scale}, {self.outer_scale}"
                )

    @property
    def is_ring(self) -> bool:
        return self.kind is RegionKind.RING

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.is_ring:
            return f"{self.kind.value}({self.inner_scale:g},{self.outer_scale:g})"
        return f"{self.kind.value}({self.outer_scale:g})"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "outer_scale": self.outer_scale,
            "inner_scale": self.inner_scale,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionSpec":
        return cls(RegionKind(d["kind"]), float(d["outer_scale"]),
                   float(d.get("inner_scale", 0.0)), d.get("name", ""))


def standard_region_set() -> list[RegionSpec]:
    """The ten regions a..j in their canonical order."""
    return [
        RegionSpec(RegionKind.RECT, 1.0, name="a"),
        RegionSpec(RegionKind.HALF_LEFT, 1.0, name="b"),
        RegionSpec(RegionKind.HALF_RIGHT, 1.0, name="c"),
        RegionSpec(RegionKind.HALF_UP, 1.0, name="d"),
        RegionSpec(RegionKind.HALF_BOTTOM, 1.0, name="e"),
        RegionSpec(RegionKind.RECT, 0.5, name="f"),
        RegionSpec(RegionKind.RING, 0.8, 0.3, name="g"),
        RegionSpec(RegionKind.RING, 1.0, 0.5, name="h"),
        RegionSpec(RegionKind.RING, 1.5, 0.8, name="i"),
        RegionSpec(RegionKind.RING, 1.8, 1.0, name="j"),
    ]


def region_by_name(name: str) -> RegionSpec:
    for spec in standard_region_set():
        if spec.name == name:
            return spec
    raise InvalidArgumentError(f"unknown region {name!r}; expected one of a..j")


@dataclass(frozen=True)
class RegionInstance:
    outer: BoundingBox
    inner: Optional[BoundingBox] = None


def instantiate_regions(spec: RegionSpec, boxes) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Vectorized :func:`instantiate_region`: returns ``(outer, inner)`` arrays.

    ``inner`` is ``None`` for non-ring specs.
    """
    boxes = as_box_array(boxes)
    outer = scale_boxes(boxes, spec.outer_scale)
    kind = spec.kind
    if kind is RegionKind.HALF_LEFT or kind is RegionKind.HALF_RIGHT:
        mid = 0.5 * (outer[:, 0] + outer[:, 2])
        outer[:, 2 if kind is RegionKind.HALF_LEFT else 0] = mid
    elif kind is RegionKind.HALF_UP or kind is RegionKind.HALF_BOTTOM:
        mid = 0.5 * (outer[:, 1] + outer[:, 3])
        outer[:, 3 if kind is RegionKind.HALF_UP else 1] = mid
    inner = None
    # inner_scale == 0 masks nothing, so it behaves like a plain rectangle
    if kind is RegionKind.RING and spec.inner_scale > 0:
        inner = scale_boxes(boxes, spec.inner_scale)
    return outer, inner


def instantiate_region(spec: RegionSpec, candidate: BoundingBox) -> RegionInstance:
    outer, inner = instantiate_regions(spec, candidate.as_array())
    outer_box = BoundingBox.from_array(outer[0])
    if inner is None:
        return RegionInstance(outer_box, None)
    return RegionInstance(outer_box, BoundingBox.from_array(inner[0]))


# ---------------------------------------------------------------------------
# Regression targets
# ---------------------------------------------------------------------------


class RegressionTarget(NamedTuple):
    tx: float
    ty: float
    tw: float
    th: float


def _centers(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(proposals, gts) -> np.ndarray:
    """Row-wise regression targets ``(tx, ty, tw, th)`` mapping proposals onto gts."""
    p = as_box_array(proposals)
    g = as_box_array(gts)
    validate_boxes(p)
    validate_boxes(g)
    pcx, pcy, pw, ph = _centers(p)
    gcx, gcy, gw, gh = _centers(g)
    return np.stack(
        [(gcx - pcx) / pw, (gcy - pcy) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1
    )


def decode_boxes(proposals, targets) -> np.ndarray:
    p = as_box_array(proposals)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    pcx, pcy, pw, ph = _centers(p)
    cx = pcx + t[:, 0] * pw
    cy = pcy + t[:, 1] * ph
    w = pw * np.exp(t[:, 2])
    h = ph * np.exp(t[:, 3])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_regression_target(proposal: BoundingBox, gt: BoundingBox) -> RegressionTarget:
    return RegressionTarget(*(float(v) for v in encode_boxes(proposal.as_array(), gt.as_array())[0]))


def decode_regression_target(proposal: BoundingBox, t) -> BoundingBox:
    return BoundingBox.from_array(decode_boxes(proposal.as_array(), np.asarray(t, dtype=np.float64))[0])


def clip_boxes(boxes, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    """Clip to the image and keep at least ``min_size`` pixels per side."""
    b = as_box_array(boxes).copy()
    b[:, 0] = np.clip(b[:, 0], 0.0, width - min_size)
    b[:, 1] = np.clip(b[:, 1], 0.0, height - min_size)
    b[:, 2] = np.clip(b[:, 2], b[:, 0] + min_size, width)
    b[:, 3] = np.clip(b[:, 3], b[:, 1] + min_size, height)
    return b
