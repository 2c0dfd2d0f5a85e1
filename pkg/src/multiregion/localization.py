"""Iterative score-and-regress localization, NMS, and box voting."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import InvalidArgumentError, ShapeMismatchError
from .featmap import ScalePyramid
from .geometry import as_box_array, clip_boxes, iou_matrix, validate_boxes
from .pooling import build_descriptors
from .recognition.bundle import ModelBundle, check_layout, refine_boxes
from .weaksup import foreground_pyramid, semantic_descriptors

Scorer = Callable[[np.ndarray], np.ndarray]
BoxRegressor = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Scored boxes of one class at one iteration (``iteration=-1`` for merged sets)."""

    class_id: int
    iteration: int
    scores: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        s = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        b = as_box_array(self.boxes)
        if len(s) != len(b):
            raise ShapeMismatchError(f"{len(s)} scores for {len(b)} boxes")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "boxes", b)

    def __len__(self) -> int:
        return len(self.scores)

    def take(self, idx) -> "CandidateSet":
        idx = np.asarray(idx, dtype=np.int64)
        return CandidateSet(self.class_id, self.iteration, self.scores[idx], self.boxes[idx])

    def entries(self) -> list[tuple[float, tuple]]:
        return [(float(s), tuple(float(v) for v in b)) for s, b in zip(self.scores, self.boxes)]

    @classmethod
    def empty(cls, class_id: int, iteration: int = -1) -> "CandidateSet":
        return cls(class_id, iteration, np.zeros(0), np.zeros((0, 4)))

    @classmethod
    def merge(cls, sets: Sequence["CandidateSet"], class_id: int) -> "CandidateSet":
        if not sets:
            return cls.empty(class_id)
        return cls(class_id, -1, np.concatenate([s.scores for s in sets]), np.vstack([s.boxes for s in sets]))


@dataclass
class LocalizationConfig:
    iterations: int = 2
    tau_s: float = -2.1
    nms_iou: float = 0.3
    vote_iou: float = 0.5
    regression_scale: float = 1.3
    rescore: bool = False  # score post-regression boxes instead of their inputs

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise InvalidArgumentError(f"iterations must be >= 1, got {self.iterations}")
        for name in ("nms_iou", "vote_iou"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise InvalidArgumentError(f"{name} must lie in (0, 1), got {v}")
        if not self.regression_scale > 0:
            raise InvalidArgumentError("regression_scale must be positive")
        self.iterations = int(self.iterations)


@dataclass(frozen=True, eq=False)
class LocalizationResult:
    merged: CandidateSet  # union of the per-iteration sets t = 1..T
    per_iteration: list
    initial: CandidateSet  # scored proposals at t = 0 before rejection
    rejected: int
    report: str = ""


def iterative_localize(
    proposals,
    scorer: Scorer,
    regressor: BoxRegressor,
    config: Optional[LocalizationConfig] = None,
    class_id: int = 0,
) -> LocalizationResult:
    """Score, reject below ``tau_s`` once, then alternate scoring and regression.

    Iteration ``t`` pairs the score of the boxes it starts from with the
    boxes regression produces from them. Scores already computed for the
    same boxes are reused rather than recomputed.
    """
    config = config or LocalizationConfig()
    b0 = as_box_array(proposals)
    if len(b0) == 0:
        raise InvalidArgumentError("iterative localization needs at least one proposal")
    validate_boxes(b0)
    s0 = np.asarray(scorer(b0), dtype=np.float64).reshape(-1)
    initial = CandidateSet(class_id, 0, s0, b0)
    keep = s0 >= config.tau_s
    rejected = int((~keep).sum())
    if not keep.any():
        report = f"class {class_id}: all {len(b0)} proposals scored below tau_s={config.tau_s}"
        return LocalizationResult(CandidateSet.empty(class_id), [], initial, rejected, report)
    boxes, prev_scores = b0[keep], s0[keep]
    sets = []
    for t in range(1, config.iterations + 1):
        scores = prev_scores if prev_scores is not None else np.asarray(scorer(boxes), float).reshape(-1)
        new_boxes = as_box_array(regressor(boxes))
        if new_boxes.shape != boxes.shape:
            raise ShapeMismatchError(f"regressor returned {new_boxes.shape} for {boxes.shape}")
        if config.rescore:
            scores = np.asarray(scorer(new_boxes), float).reshape(-1)
            prev_scores = scores
        else:
            prev_scores = None
        sets.append(CandidateSet(class_id, t, scores, new_boxes))
        boxes = new_boxes
    report = f"class {class_id}: kept {int(keep.sum())} of {len(b0)} proposals"
    return LocalizationResult(CandidateSet.merge(sets, class_id), sets, initial, rejected, report)


def nms_indices(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy NMS keeping a box iff its IoU with every kept box is <= the threshold.

    Equal scores resolve by input order; the result lists kept indices in
    acceptance order.
    """
    if not 0 < iou_threshold < 1:
        raise InvalidArgumentError(f"NMS threshold must lie in (0, 1), got {iou_threshold}")
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        return np.zeros(0, np.int64)
    validate_boxes(boxes)
    order = np.argsort(-scores, kind="stable").astype(np.int64)
    return _kernels.greedy_nms(boxes, order, float(iou_threshold))


def nms(detections: CandidateSet, iou_threshold: float = 0.3) -> CandidateSet:
    return detections.take(nms_indices(detections.boxes, detections.scores, iou_threshold))


def box_voting(kept: CandidateSet, pool: CandidateSet, vote_iou: float = 0.5) -> CandidateSet:
    """Replace each kept box by the score-weighted mean of its overlapping pool boxes.

    Neighbors have IoU strictly above ``vote_iou``; weights are
    ``max(0, score)``. Boxes whose neighborhood weighs nothing stay put.
    """
    if not 0 < vote_iou < 1:
        raise InvalidArgumentError(f"vote_iou must lie in (0, 1), got {vote_iou}")
    if len(kept) == 0 or len(pool) == 0:
        return kept
    ious = iou_matrix(kept.boxes, pool.boxes)
    w = np.where(ious > vote_iou, np.maximum(pool.scores, 0.0)[None, :], 0.0)
    total = w.sum(axis=1)
    out = kept.boxes.copy()
    ok = total > 0
    out[ok] = (w[ok] / total[ok, None]) @ pool.boxes
    return CandidateSet(kept.class_id, kept.iteration, kept.scores.copy(), out)


def localize_class(
    proposals,
    scorer: Scorer,
    regressor: BoxRegressor,
    config: Optional[LocalizationConfig] = None,
    class_id: int = 0,
) -> tuple[CandidateSet, LocalizationResult]:
    """Iterative localization, NMS, then voting against the merged set."""
    config = config or LocalizationConfig()
    result = iterative_localize(proposals, scorer, regressor, config, class_id)
    kept = nms(result.merged, config.nms_iou)
    final = box_voting(kept, result.merged, config.vote_iou)
    return CandidateSet(class_id, config.iterations, final.scores, final.boxes), result


# ---------------------------------------------------------------------------
# Feature-backed scoring for one image
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class SceneModel:
    """A bundle bound to one image's feature pyramid.

    Regressed boxes are clipped to the image so later iterations keep
    projecting onto the feature maps.
    """

    bundle: ModelBundle
    pyramid: ScalePyramid
    _fg: Optional[ScalePyramid] = field(default=None, init=False)

    def __post_init__(self):
        if self.pyramid.channels != self.bundle.layout.blocks[0].channels:
            raise ShapeMismatchError(
                f"feature maps have {self.pyramid.channels} channels, model expects "
                f"{self.bundle.layout.blocks[0].channels}"
            )
        if self.bundle.foreground is not None:
            self._fg = foreground_pyramid(self.bundle.foreground, self.pyramid, self.bundle.semantic_scales)

    @property
    def image_size(self) -> tuple[int, int]:
        return self.pyramid.native_image_size

    def clip(self, boxes) -> np.ndarray:
        w, h = self.image_size
        return clip_boxes(boxes, w, h)

    def describe(self, boxes) -> np.ndarray:
        b = self.bundle
        x, _ = build_descriptors(self.pyramid, boxes, b.specs, b.grid, b.target_side)
        if self._fg is not None:
            sem, _ = semantic_descriptors(self._fg, boxes, b.semantic_grid, b.semantic_target_side)
            x = np.hstack([x, sem])
        return check_layout(b.layout, x)

    def describe_regression(self, boxes) -> np.ndarray:
        b = self.bundle
        x, _ = build_descriptors(self.pyramid, boxes, [b.regression_spec], b.regression_grid, b.target_side)
        return check_layout(b.regression_layout, x)

    def scores(self, boxes) -> np.ndarray:
        """``(n, K)`` classifier scores."""
        boxes = as_box_array(boxes)
        if len(boxes) == 0:
            return np.zeros((0, self.bundle.n_classes))
        return self.bundle.classifier.scores(self.describe(boxes))

    def refine(self, boxes) -> np.ndarray:
        """``(n, K, 4)`` regressed boxes, clipped to the image."""
        boxes = as_box_array(boxes)
        if len(boxes) == 0:
            return np.zeros((0, self.bundle.n_classes, 4))
        out = refine_boxes(self.bundle.regressor.predict(self.describe_regression(boxes)), boxes)
        n, k, _ = out.shape
        return self.clip(out.reshape(n * k, 4)).reshape(n, k, 4)


def detect(
    pyramid: ScalePyramid,
    proposals,
    bundle: ModelBundle,
    config: Optional[LocalizationConfig] = None,
    classes: Optional[Sequence[int]] = None,
) -> dict:
    """Final detections per class id as :class:`CandidateSet` objects.

    Proposals are clipped to the image first. Scoring and regression of box
    sets shared between classes run once.
    """
    config = config or LocalizationConfig()
    if bundle.regression_spec.outer_scale != config.regression_scale:
        raise InvalidArgumentError(
            f"bundle regresses from a {bundle.regression_spec.outer_scale}x region, "
            f"config asks for {config.regression_scale}x"
        )
    scene = SceneModel(bundle, pyramid)
    classes = range(bundle.n_classes) if classes is None else classes
    b0 = scene.clip(proposals)
    out = {}
    if len(b0) == 0:
        return {c: CandidateSet.empty(c, config.iterations) for c in classes}
    # classes often query identical box sets (the surviving proposals), so memoize by content
    score_cache: dict = {}
    refine_cache: dict = {}

    def cached(cache, fn, boxes):
        key = boxes.tobytes()
        if key not in cache:
            cache[key] = fn(boxes)
        return cache[key]

    for c in classes:

        def scorer(boxes, c=c):
            return cached(score_cache, scene.scores, boxes)[:, c]

        def regressor(boxes, c=c):
            return cached(refine_cache, scene.refine, boxes)[:, c]

        final, _ = localize_class(b0, scorer, regressor, config, c)
        out[c] = final
    return out


def mean_max_iou(cset: CandidateSet, gts) -> float:
    """Mean over boxes of their best IoU with any ground truth; NaN for an empty set."""
    if len(cset) == 0:
        return math.nan
    gts = as_box_array(gts)
    if len(gts) == 0:
        return 0.0
    return float(iou_matrix(cset.boxes, gts).max(axis=1).mean())
