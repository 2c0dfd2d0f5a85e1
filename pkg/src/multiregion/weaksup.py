"""Box-derived segmentation targets, a per-cell foreground scorer, and the semantic block.

The semantic block pools per-class foreground probabilities rather than
learned segmentation features, so its channel count equals the number of
classes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateDataError, InvalidArgumentError, ShapeMismatchError
from .featmap import FeatureMap, ScalePyramid, save_pgm
from .geometry import BoundingBox, RegionKind, RegionSpec, as_box_array, instantiate_region
from .optim import FeatureScaler, SGDConfig, logistic_loss, sgd, sigmoid
from .pooling import SEMANTIC_GRID, PooledFeature, adaptive_max_pool, build_descriptors, descriptor_layout

SEMANTIC_SCALE = 1.5
SEMANTIC_TARGET_SIDE = 288.0
SEMANTIC_SPEC = RegionSpec(RegionKind.RECT, SEMANTIC_SCALE, name="semantic")


@dataclass(frozen=True, eq=False)
class SegmentationTarget:
    class_id: int
    mask: np.ndarray  # (H, W) uint8 in {0, 1}


def cell_center_mask(boxes, map_dims, stride: float) -> np.ndarray:
    """Cells whose centers fall inside any box; boxes are half-open ``[x1, x2) x [y1, y2)``."""
    h, w = map_dims
    cx = (np.arange(w) + 0.5) * stride
    cy = (np.arange(h) + 0.5) * stride
    mask = np.zeros((h, w), dtype=np.uint8)
    for x1, y1, x2, y2 in as_box_array(boxes):
        cols = (cx >= x1) & (cx < x2)
        rows = (cy >= y1) & (cy < y2)
        mask[np.ix_(rows, cols)] = 1
    return mask


def make_segmentation_targets(gts, map_dims, stride: float, n_classes: int, gt_classes=None) -> list[SegmentationTarget]:
    """One binary mask per class built from that class's boxes alone.

    ``stride`` is the native-image size of one map cell. Class ids come from
    ``gt_classes`` or from the boxes' ``class_id``.
    """
    if n_classes < 1:
        raise InvalidArgumentError("n_classes must be >= 1")
    boxes = as_box_array(gts)
    if gt_classes is None:
        gt_classes = [g.class_id for g in gts] if len(boxes) else []
    classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    if len(classes) != len(boxes):
        raise InvalidArgumentError("every ground-truth box needs a class id")
    if len(classes) and (classes.min() < 0 or classes.max() >= n_classes):
        raise InvalidArgumentError(f"class ids must lie in [0, {n_classes})")
    h, w = int(map_dims[0]), int(map_dims[1])
    return [
        SegmentationTarget(c, cell_center_mask(boxes[classes == c], (h, w), stride))
        for c in range(n_classes)
    ]


def targets_for_map(gts, fmap: FeatureMap, n_classes: int, gt_classes=None) -> list[SegmentationTarget]:
    return make_segmentation_targets(gts, (fmap.height, fmap.width), fmap.cell_size, n_classes, gt_classes)


def export_masks(targets: Sequence[SegmentationTarget], directory, prefix: str = "mask", class_names=None) -> list[Path]:
    """Write each mask as an 8-bit PGM (foreground 255) and return the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t in targets:
        name = class_names[t.class_id] if class_names else str(t.class_id)
        path = directory / f"{prefix}_{name}.pgm"
        save_pgm(t.mask.astype(np.float64), path)
        paths.append(path)
    return paths


@dataclass(frozen=True, eq=False)
class ForegroundMap:
    """Per-class foreground probabilities ``(K, H, W)`` on one feature-map grid."""

    probs: np.ndarray
    stride: float
    image_scale: float = 1.0
    scale_id: int = 0

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float32)
        if p.ndim != 3:
            raise ShapeMismatchError(f"foreground maps must be (K, H, W), got {p.shape}")
        if p.size and (p.min() < 0 or p.max() > 1 or not np.isfinite(p).all()):
            raise InvalidArgumentError("foreground probabilities must lie in [0, 1]")
        object.__setattr__(self, "probs", p)

    def as_feature_map(self) -> FeatureMap:
        return FeatureMap(self.probs, self.stride, self.scale_id, self.image_scale)


@dataclass(frozen=True, eq=False)
class ForegroundScorer:
    """Independent per-class logistic models over per-cell feature vectors."""

    weights: np.ndarray  # (K, C)
    bias: np.ndarray  # (K,)
    final_loss: float = float("nan")

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float32)
        b = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
        if w.ndim != 2 or b.shape[0] != w.shape[0]:
            raise ShapeMismatchError(f"weights {w.shape} and bias {b.shape} disagree")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @classmethod
    def untrained(cls, n_classes: int, channels: int) -> "ForegroundScorer":
        return cls(np.zeros((n_classes, channels)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    def predict(self, fmap: FeatureMap) -> ForegroundMap:
        if fmap.channels != self.weights.shape[1]:
            raise ShapeMismatchError(f"map has {fmap.channels} channels, scorer expects {self.weights.shape[1]}")
        cells = fmap.values.reshape(fmap.channels, -1).T.astype(np.float64)
        z = cells @ self.weights.astype(np.float64).T + self.bias.astype(np.float64)
        probs = sigmoid(z).T.reshape(self.n_classes, fmap.height, fmap.width)
        return ForegroundMap(probs, fmap.stride, fmap.image_scale, fmap.scale_id)


def foreground_config(**kw) -> SGDConfig:
    return SGDConfig(**{"lr": 0.01, "momentum": 0.9, "batch_size": 256, "epochs": 20, "lr_step": 30000, **kw})


def cell_samples(fmap: FeatureMap, targets: Sequence[SegmentationTarget]) -> tuple[np.ndarray, np.ndarray]:
    """Flatten one map into ``(cells, C)`` features and ``(cells, K)`` labels."""
    x = fmap.values.reshape(fmap.channels, -1).T
    y = np.stack([t.mask.reshape(-1) for t in sorted(targets, key=lambda t: t.class_id)], axis=1)
    if y.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"masks cover {y.shape[0]} cells but the map has {x.shape[0]}")
    return x, y


def train_foreground_scorer(
    samples: Sequence[tuple[FeatureMap, Sequence[SegmentationTarget]]],
    config: Optional[SGDConfig] = None,
    seed: int = 0,
    standardize: bool = True,
) -> ForegroundScorer:
    """Fit the per-class logistic models on every cell of every sample map."""
    config = config or foreground_config()
    if not samples:
        raise DegenerateDataError("no foreground training maps")
    xs, ys = zip(*(cell_samples(f, t) for f, t in samples))
    x = np.concatenate(xs).astype(np.float64)
    y = np.concatenate(ys).astype(np.float64)
    fg = y.sum(axis=0)
    bad = [c for c in range(y.shape[1]) if fg[c] == 0 or fg[c] == len(y)]
    if bad:
        raise DegenerateDataError(
            f"classes {bad} have only one label over {len(y)} cells; each needs foreground and background"
        )
    scaler = FeatureScaler.fit(x) if standardize else FeatureScaler.identity(x.shape[1])
    xs_ = scaler.transform(x)
    params = {"W": np.zeros((y.shape[1], x.shape[1])), "b": np.zeros(y.shape[1])}
    sgd(params, lambda p, idx: logistic_loss(p, xs_[idx], y[idx], config.weight_decay), len(y), config, seed)
    final, _ = logistic_loss(params, xs_, y, config.weight_decay)
    w, b = scaler.fold(params["W"], params["b"])
    return ForegroundScorer(w, b, float(final))


def foreground_pyramid(scorer: ForegroundScorer, pyramid: ScalePyramid, scales=None) -> ScalePyramid:
    """Foreground maps as a pyramid; by default only the coarsest level."""
    chosen = [pyramid.scales[0]] if scales is None else list(scales)
    levels = tuple((s, scorer.predict(pyramid.level(s)).as_feature_map()) for s in chosen)
    return ScalePyramid(levels, pyramid.native_image_size)


def semantic_descriptor(fg: ForegroundMap, candidate: BoundingBox, grid=SEMANTIC_GRID) -> PooledFeature:
    """Pool the class probability maps over the 1.5x enlarged candidate."""
    return adaptive_max_pool(fg.as_feature_map(), instantiate_region(SEMANTIC_SPEC, candidate), grid)


def semantic_descriptors(fg_pyramid: ScalePyramid, boxes, grid=SEMANTIC_GRID, target_side: float = SEMANTIC_TARGET_SIDE):
    """Batch form returning ``(N, K * gh * gw)`` plus the one-block layout."""
    return build_descriptors(fg_pyramid, boxes, [SEMANTIC_SPEC], grid, target_side)


def semantic_layout(n_classes: int, grid=SEMANTIC_GRID):
    return descriptor_layout([SEMANTIC_SPEC], n_classes, grid)
