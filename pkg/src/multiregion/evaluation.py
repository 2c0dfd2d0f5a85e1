"""Average precision, false-positive taxonomy, and score/overlap statistics."""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .errors import InvalidArgumentError, UndefinedMetricError
from .geometry import as_box_array, iou_matrix

FORMAT_VERSION = 1
CONFUSION_IOU = 0.1
WELL_LOCALIZED = 0.5


class Outcome(enum.IntEnum):
    TP = 0
    LOC = 1
    SIM = 2
    OTH = 3
    BG = 4
    DUP = 5
    IGNORED = 6  # matched a difficult ground truth; counts neither way


REPORT_CATEGORIES = ("Cor", "Loc", "Sim", "Oth", "BG")

VOC_CLASSES = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)
VOC_SIMILARITY = {
    **{c: "animal" for c in ("bird", "cat", "cow", "dog", "horse", "sheep")},
    **{c: "vehicle" for c in ("aeroplane", "bicycle", "boat", "bus", "car", "motorbike", "train")},
    **{c: "furniture" for c in ("chair", "diningtable", "sofa")},
}


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    ap_variant: str = "all_point"
    similarity_groups: dict = field(default_factory=dict)  # class id -> group name
    correlation: str = "pearson"

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise InvalidArgumentError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if self.ap_variant not in ("all_point", "eleven_point"):
            raise InvalidArgumentError(f"unknown AP variant {self.ap_variant!r}")
        if self.correlation not in ("pearson", "spearman"):
            raise InvalidArgumentError(f"unknown correlation estimator {self.correlation!r}")


def voc_similarity_groups(class_names: Sequence[str] = VOC_CLASSES) -> dict:
    """Preset grouping keyed by class index; ungrouped classes are their own group."""
    return {i: VOC_SIMILARITY.get(name, name) for i, name in enumerate(class_names)}


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Per-detection outcome for one class in one image, in ranked order."""

    scores: np.ndarray
    outcomes: np.ndarray
    matched_gt: np.ndarray  # gt index for TP (and the blocking gt for DUP), else -1
    n_gt: int  # non-difficult ground truths of the class

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def is_tp(self) -> np.ndarray:
        return self.outcomes == Outcome.TP

    @classmethod
    def concat(cls, results: Sequence["MatchResult"]) -> "MatchResult":
        """Pool per-image results into one list re-ranked by score (stable)."""
        if not results:
            return cls(np.zeros(0), np.zeros(0, np.int8), np.zeros(0, np.int64), 0)
        s = np.concatenate([r.scores for r in results])
        order = np.argsort(-s, kind="stable")
        return cls(
            s[order],
            np.concatenate([r.outcomes for r in results])[order],
            np.concatenate([r.matched_gt for r in results])[order],
            sum(r.n_gt for r in results),
        )


def match_detections(
    scores,
    boxes,
    class_id: int,
    gt_boxes,
    gt_classes,
    difficult=None,
    iou_threshold: float = 0.5,
    similarity_groups: Optional[Mapping] = None,
) -> MatchResult:
    """Greedy matching of one class's detections in one image.

    Detections are visited by descending score (stable). A detection is a
    TP when some unmatched, non-difficult same-class GT reaches the
    threshold (the highest-IoU one is taken). Otherwise it is ignored if a
    difficult same-class GT reaches the threshold, a duplicate if an already
    matched one does, and else typed Loc / Sim / Oth / BG by overlap >= 0.1.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    b = as_box_array(boxes)
    gb = as_box_array(gt_boxes)
    gc = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    diff = np.zeros(len(gb), bool) if difficult is None else np.asarray(difficult, bool).reshape(-1)
    if len(gc) != len(gb) or len(diff) != len(gb):
        raise InvalidArgumentError("ground-truth boxes, classes and difficult flags must align")
    groups = similarity_groups or {}
    order = np.argsort(-s, kind="stable")
    s, b = s[order], b[order]
    n = len(s)
    outcomes = np.full(n, Outcome.BG, np.int8)
    matched_gt = np.full(n, -1, np.int64)
    same = gc == class_id
    n_gt = int((same & ~diff).sum())
    if n == 0:
        return MatchResult(s, outcomes, matched_gt, n_gt)
    ious = iou_matrix(b, gb) if len(gb) else np.zeros((n, 0))
    taken = np.zeros(len(gb), bool)
    my_group = groups.get(class_id)
    similar = np.array([my_group is not None and groups.get(int(c)) == my_group for c in gc], bool) & ~same
    for i in range(n):
        row = ious[i]
        free = same & ~diff & ~taken & (row >= iou_threshold)
        if free.any():
            j = int(np.flatnonzero(free)[np.argmax(row[free])])
            taken[j] = True
            outcomes[i], matched_gt[i] = Outcome.TP, j
        elif (same & diff & (row >= iou_threshold)).any():
            outcomes[i] = Outcome.IGNORED
        elif (same & taken & (row >= iou_threshold)).any():
            cand = np.flatnonzero(same & taken & (row >= iou_threshold))
            outcomes[i], matched_gt[i] = Outcome.DUP, int(cand[np.argmax(row[cand])])
        elif (same & (row >= CONFUSION_IOU)).any():
            outcomes[i] = Outcome.LOC
        elif (similar & (row >= CONFUSION_IOU)).any():
            outcomes[i] = Outcome.SIM
        elif (~same & (row >= CONFUSION_IOU)).any():
            outcomes[i] = Outcome.OTH
    tp_gts = matched_gt[outcomes == Outcome.TP]
    assert len(np.unique(tp_gts)) == len(tp_gts), "a ground truth was matched twice"
    return MatchResult(s, outcomes, matched_gt, n_gt)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------


def precision_recall(matches: MatchResult, n_gt: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision and recall over ranked, non-ignored detections."""
    n_gt = matches.n_gt if n_gt is None else n_gt
    keep = matches.outcomes != Outcome.IGNORED
    tp = (matches.outcomes[keep] == Outcome.TP).astype(np.float64)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    return ctp / np.maximum(ctp + cfp, np.finfo(float).tiny), ctp / n_gt


def average_precision(matches: MatchResult, n_gt: Optional[int] = None, variant: str = "all_point") -> float:
    n_gt = matches.n_gt if n_gt is None else n_gt
    if n_gt <= 0:
        raise UndefinedMetricError("average precision is undefined without ground truth")
    prec, rec = precision_recall(matches, n_gt)
    if len(prec) == 0:
        return 0.0
    if variant == "eleven_point":
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            hits = prec[rec >= t - 1e-12]
            total += hits.max() if hits.size else 0.0
        return total / 11.0
    if variant != "all_point":
        raise InvalidArgumentError(f"unknown AP variant {variant!r}")
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def ap_from_flags(is_tp: Sequence[bool], n_gt: int, variant: str = "all_point") -> float:
    """AP of an already ranked list of TP/FP flags."""
    flags = np.asarray(is_tp, bool)
    outcomes = np.where(flags, Outcome.TP, Outcome.BG).astype(np.int8)
    m = MatchResult(np.zeros(len(flags)), outcomes, np.full(len(flags), -1), n_gt)
    return average_precision(m, n_gt, variant)


# ---------------------------------------------------------------------------
# Score / overlap statistics
# ---------------------------------------------------------------------------


def max_overlaps(boxes, gt_boxes) -> np.ndarray:
    b, g = as_box_array(boxes), as_box_array(gt_boxes)
    if len(g) == 0:
        return np.zeros(len(b))
    return iou_matrix(b, g).max(axis=1)


def score_iou_correlation(scores, overlaps, method: str = "pearson", min_iou: float = CONFUSION_IOU) -> float:
    """Correlation of scores with max-IoU over proposals overlapping some GT by >= ``min_iou``."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    o = np.asarray(overlaps, dtype=np.float64).reshape(-1)
    if len(s) != len(o):
        raise InvalidArgumentError("scores and overlaps must align")
    keep = o >= min_iou
    s, o = s[keep], o[keep]
    if len(s) < 2:
        raise UndefinedMetricError(f"correlation needs >= 2 qualifying proposals, got {len(s)}")
    if np.ptp(s) == 0 or np.ptp(o) == 0:
        raise UndefinedMetricError("correlation is undefined for constant scores or overlaps")
    if method == "pearson":
        return float(stats.pearsonr(s, o)[0])
    if method == "spearman":
        return float(stats.spearmanr(s, o)[0])
    raise InvalidArgumentError(f"unknown correlation estimator {method!r}")


def localization_auc(scores, overlaps) -> float:
    """ROC AUC of scores separating max-IoU in [0.5, 1] from [0.1, 0.5); ties count half."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    o = np.asarray(overlaps, dtype=np.float64).reshape(-1)
    pos = s[o >= WELL_LOCALIZED]
    neg = s[(o >= CONFUSION_IOU) & (o < WELL_LOCALIZED)]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetricError(
            f"AUC needs both bands populated (well-localized {len(pos)}, mis-localized {len(neg)})"
        )
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


# ---------------------------------------------------------------------------
# Error taxonomy
# ---------------------------------------------------------------------------


def error_report(matches: MatchResult, top_n: Optional[int] = None, fold_duplicates: bool = True) -> dict:
    """Fractions of the top-N detections per category (N defaults to the GT count).

    Duplicates count as localization errors unless ``fold_duplicates`` is
    false, in which case they get their own ``Dup`` entry.
    """
    top_n = matches.n_gt if top_n is None else top_n
    keep = matches.outcomes != Outcome.IGNORED
    out = matches.outcomes[keep][: max(top_n, 0)]
    names = list(REPORT_CATEGORIES) + ([] if fold_duplicates else ["Dup"])
    counts = dict.fromkeys(names, 0)
    label = {Outcome.TP: "Cor", Outcome.LOC: "Loc", Outcome.SIM: "Sim", Outcome.OTH: "Oth", Outcome.BG: "BG",
             Outcome.DUP: "Loc" if fold_duplicates else "Dup"}
    for o in out:
        counts[label[Outcome(int(o))]] += 1
    total = len(out)
    report = {k: (v / total if total else 0.0) for k, v in counts.items()}
    report["n"] = total
    return report


# ---------------------------------------------------------------------------
# Dataset-level evaluation and writers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ImageTruth:
    boxes: np.ndarray
    classes: np.ndarray
    difficult: np.ndarray


@dataclass
class ClassMetrics:
    class_id: int
    name: str
    n_gt: int
    ap: dict  # threshold -> AP (None when undefined)
    correlation: Optional[float]
    auc: Optional[float]
    errors: dict


def _safe(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except UndefinedMetricError:
        return None


def evaluate(
    detections: Mapping,
    truths: Mapping,
    class_names: Sequence[str],
    config: Optional[EvalConfig] = None,
    thresholds: Sequence[float] = (0.5, 0.7),
    proposals: Optional[Mapping] = None,
) -> list[ClassMetrics]:
    """Per-class metrics over a dataset.

    ``detections[image][class_id]`` is ``(scores, boxes)``; ``truths[image]``
    an :class:`ImageTruth`. ``proposals[image][class_id]`` (scores, boxes)
    feeds the correlation and AUC statistics; without it those use the
    detections themselves. Images are processed in sorted-key order.
    """
    config = config or EvalConfig()
    thresholds = sorted(set(float(t) for t in thresholds) | {config.iou_threshold})
    images = sorted(truths)
    out = []
    for c, name in enumerate(class_names):
        per_thr = {}
        primary = None
        for thr in thresholds:
            results = []
            for img in images:
                t = truths[img]
                sc, bx = detections.get(img, {}).get(c, (np.zeros(0), np.zeros((0, 4))))
                results.append(match_detections(sc, bx, c, t.boxes, t.classes, t.difficult, thr,
                                                config.similarity_groups))
            pooled = MatchResult.concat(results)
            per_thr[thr] = _safe(average_precision, pooled, None, config.ap_variant)
            if thr == config.iou_threshold:
                primary = pooled
        src = proposals if proposals is not None else detections
        all_s, all_o = [], []
        for img in images:
            t = truths[img]
            sc, bx = src.get(img, {}).get(c, (np.zeros(0), np.zeros((0, 4))))
            gt_c = t.boxes[(t.classes == c) & ~t.difficult] if len(t.boxes) else np.zeros((0, 4))
            all_s.append(np.asarray(sc, float).reshape(-1))
            all_o.append(max_overlaps(bx, gt_c))
        s, o = np.concatenate(all_s), np.concatenate(all_o)
        out.append(ClassMetrics(
            c, name, primary.n_gt, per_thr,
            _safe(score_iou_correlation, s, o, config.correlation),
            _safe(localization_auc, s, o),
            error_report(primary),
        ))
    return out


def mean_ap(metrics: Sequence[ClassMetrics], threshold: float) -> Optional[float]:
    vals = [m.ap[threshold] for m in metrics if m.ap.get(threshold) is not None]
    return float(np.mean(vals)) if vals else None


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else None


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def metrics_csv(metrics: Sequence[ClassMetrics]) -> str:
    thresholds = sorted({t for m in metrics for t in m.ap})
    buf = io.StringIO()
    buf.write(f"# format_version={FORMAT_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class"] + [f"ap@{t:g}" for t in thresholds] + ["correlation", "auc"]
               + [c.lower() for c in REPORT_CATEGORIES])
    for m in metrics:
        w.writerow([m.name] + [_fmt(m.ap[t]) for t in thresholds] + [_fmt(m.correlation), _fmt(m.auc)]
                   + [_fmt(m.errors[c]) for c in REPORT_CATEGORIES])
    w.writerow(["mean"] + [_fmt(mean_ap(metrics, t)) for t in thresholds]
               + [_fmt(_mean([m.correlation for m in metrics])), _fmt(_mean([m.auc for m in metrics]))]
               + [_fmt(_mean([m.errors[c] for m in metrics])) for c in REPORT_CATEGORIES])
    return buf.getvalue()


def metrics_summary(metrics: Sequence[ClassMetrics], config: EvalConfig, extra: Optional[dict] = None) -> dict:
    thresholds = sorted({t for m in metrics for t in m.ap})
    return {
        "format_version": FORMAT_VERSION,
        "config": {
            "iou_threshold": config.iou_threshold,
            "ap_variant": config.ap_variant,
            "correlation": config.correlation,
            "similarity_groups": {str(k): v for k, v in sorted(config.similarity_groups.items())},
        },
        "mAP": {f"{t:g}": mean_ap(metrics, t) for t in thresholds},
        "mean_correlation": _mean([m.correlation for m in metrics]),
        "mean_auc": _mean([m.auc for m in metrics]),
        "classes": [
            {"class": m.name, "n_gt": m.n_gt, "ap": {f"{t:g}": m.ap[t] for t in thresholds},
             "correlation": m.correlation, "auc": m.auc, "errors": m.errors}
            for m in metrics
        ],
        **(extra or {}),
    }


def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
