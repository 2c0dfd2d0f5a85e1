"""Training-sample labeling by overlap with ground truth."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import InvalidArgumentError
from ..geometry import BoundingBox, as_box_array, encode_boxes, iou_matrix

SOFTMAX_POS = 0.5
SOFTMAX_NEG_LOW = 0.1
SVM_NEG = 0.3
REGRESSION_MIN = 0.4


class LabelRule(str, enum.Enum):
    SOFTMAX = "softmax"
    SVM = "svm"
    REGRESSION = "regression"


class SampleKind(enum.IntEnum):
    DISCARDED = 0
    POSITIVE = 1
    NEGATIVE = 2


@dataclass(frozen=True)
class SampleLabels:
    """Per-proposal labels as parallel arrays.

    ``class_id`` is -1 unless the proposal is positive; ``gt_index`` is the
    argmax-IoU ground truth (lowest index on ties) or -1 without ground truth.
    ``targets`` holds regression targets for kept samples under the
    regression rule and is ``None`` otherwise.
    """

    kind: np.ndarray
    class_id: np.ndarray
    max_iou: np.ndarray
    gt_index: np.ndarray
    targets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.kind)

    @property
    def positive(self) -> np.ndarray:
        return self.kind == SampleKind.POSITIVE

    @property
    def negative(self) -> np.ndarray:
        return self.kind == SampleKind.NEGATIVE


@dataclass(frozen=True)
class TrainingSample:
    """One labeled proposal; ``label`` is a class id or ``None`` for background."""

    descriptor: Optional[np.ndarray]
    label: Optional[int]
    max_gt_iou: float
    matched_gt: Optional[BoundingBox]


def _class_of(g) -> int:
    return g.class_id if isinstance(g, BoundingBox) and g.class_id is not None else -1


def label_samples(proposals, gts, gt_classes=None, rule="softmax") -> SampleLabels:
    """Label proposals under one of the three overlap rules.

    softmax: positive at max IoU >= 0.5, negative in [0.1, 0.5), else discarded.
    svm: negative below 0.3, everything else discarded (ground-truth boxes
    themselves are the positives and are added by the caller).
    regression: kept (positive) at max IoU >= 0.4, with targets toward the
    argmax ground truth.
    """
    try:
        rule = LabelRule(rule)
    except ValueError as exc:
        raise InvalidArgumentError(f"unknown labeling rule {rule!r}") from exc
    props = as_box_array(proposals)
    gt_arr = as_box_array(gts)
    if gt_classes is None:
        gt_classes = [_class_of(g) for g in gts] if not isinstance(gts, np.ndarray) else [-1] * len(gt_arr)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    if len(gt_classes) != len(gt_arr):
        raise InvalidArgumentError("gt_classes must match the number of ground-truth boxes")
    n = len(props)
    if len(gt_arr):
        ious = iou_matrix(props, gt_arr)
        gt_index = ious.argmax(axis=1) if n else np.zeros(0, np.int64)
        max_iou = ious[np.arange(n), gt_index] if n else np.zeros(0)
    else:
        gt_index = np.full(n, -1, np.int64)
        max_iou = np.zeros(n)
    kind = np.full(n, SampleKind.DISCARDED, np.int8)
    targets = None
    if rule is LabelRule.SOFTMAX:
        kind[max_iou >= SOFTMAX_POS] = SampleKind.POSITIVE
        kind[(max_iou >= SOFTMAX_NEG_LOW) & (max_iou < SOFTMAX_POS)] = SampleKind.NEGATIVE
    elif rule is LabelRule.SVM:
        kind[max_iou < SVM_NEG] = SampleKind.NEGATIVE
    else:
        kind[max_iou >= REGRESSION_MIN] = SampleKind.POSITIVE
        targets = np.zeros((n, 4))
        keep = kind == SampleKind.POSITIVE
        if keep.any():
            targets[keep] = encode_boxes(props[keep], gt_arr[gt_index[keep]])
    class_id = np.full(n, -1, np.int64)
    pos = kind == SampleKind.POSITIVE
    class_id[pos] = gt_classes[gt_index[pos]]
    return SampleLabels(kind, class_id, np.asarray(max_iou, float), np.asarray(gt_index, np.int64), targets)


def training_samples(proposals, gts, gt_classes=None, rule="softmax", descriptors=None) -> list[TrainingSample]:
    """Record-style view of :func:`label_samples`, keeping non-discarded proposals."""
    labels = label_samples(proposals, gts, gt_classes, rule)
    gt_arr = as_box_array(gts)
    out = []
    for i in np.flatnonzero(labels.kind != SampleKind.DISCARDED):
        g = int(labels.gt_index[i])
        out.append(TrainingSample(
            None if descriptors is None else np.asarray(descriptors[i]),
            int(labels.class_id[i]) if labels.kind[i] == SampleKind.POSITIVE else None,
            float(labels.max_iou[i]),
            BoundingBox.from_array(gt_arr[g]) if g >= 0 else None,
        ))
    return out
