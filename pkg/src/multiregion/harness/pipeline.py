"""End-to-end steps: extract, train, detect, evaluate, analyze, ablate.

Every step is a plain function over a :class:`DatasetManifest` and an
:class:`ExperimentConfig`; the CLI is a thin layer over these. Per-image work
can fan out over worker processes and results are always collected in
image-id order, so outputs do not depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..errors import DataError, DegenerateDataError
from ..evaluation import (
    REPORT_CATEGORIES,
    ImageTruth,
    MatchResult,
    Outcome,
    dumps_json,
    error_report,
    evaluate,
    match_detections,
    mean_ap,
    metrics_csv,
    metrics_summary,
)
from ..featmap import ScalePyramid, export_feature_maps, import_feature_maps, toy_extract
from ..geometry import RegionKind, RegionSpec, clip_boxes
from ..localization import SceneModel, detect
from ..optim import FeatureScaler
from ..pooling import build_descriptors, descriptor_layout
from ..recognition import (
    LinearHead,
    ModelBundle,
    label_samples,
    train_regressor,
    train_softmax_head,
    train_svm_hard_negative,
)
from ..weaksup import (
    foreground_pyramid,
    semantic_descriptors,
    semantic_layout,
    targets_for_map,
    train_foreground_scorer,
)
from .config import ExperimentConfig
from .dataset import DatasetManifest, ImageRecord

log = logging.getLogger(__name__)

FEATURE_SUFFIX = ".mrfm"


# ---------------------------------------------------------------------------
# Feature access and parallel map
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSource:
    """Feature pyramids from exported ``.mrfm`` files, or computed from rasters."""

    manifest: DatasetManifest
    features_dir: Optional[Path] = None
    scales: tuple = ()
    stride: int = 16

    @classmethod
    def from_config(cls, manifest: DatasetManifest, config: ExperimentConfig, features_dir=None):
        return cls(manifest, Path(features_dir) if features_dir else None, tuple(config.scales), config.stride)

    def pyramid(self, image: ImageRecord) -> ScalePyramid:
        if self.features_dir is not None:
            p = self.features_dir / f"{image.image_id}{FEATURE_SUFFIX}"
            if not p.is_file():
                raise DataError(f"missing feature file {p}")
            return import_feature_maps(p, (image.width, image.height))
        return toy_extract(self.manifest.load_raster(image), self.scales, self.stride)


def _pool_map(fn: Callable, items: Sequence, workers: int) -> list:
    """``map`` in item order, over processes when ``workers > 1``."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=min(workers, len(items)), mp_context=ctx) as ex:
        return list(ex.map(fn, items))


def _sorted(images) -> list[ImageRecord]:
    return sorted(images, key=lambda im: im.image_id)


# ---------------------------------------------------------------------------
# Extraction
# ---------------------------------------------------------------------------


def _extract_one(image: ImageRecord, source: FeatureSource, out_dir: Path) -> str:
    path = out_dir / f"{image.image_id}{FEATURE_SUFFIX}"
    export_feature_maps(source.pyramid(image), path)
    return path.name


def extract_features(manifest: DatasetManifest, config: ExperimentConfig, out_dir, split: Optional[str] = None,
                     workers: Optional[int] = None) -> list[str]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    source = FeatureSource.from_config(manifest, config)
    images = _sorted(manifest.split(split))
    return _pool_map(partial(_extract_one, source=source, out_dir=out_dir), images, workers or config.workers)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def regression_spec(config: ExperimentConfig) -> RegionSpec:
    return RegionSpec(RegionKind.RECT, config.regression_scale, name="regression")


@dataclass(eq=False)
class ImageSamples:
    """Descriptors of one training image: proposals first, then ground truth."""

    image_id: str
    boxes: np.ndarray
    n_proposals: int
    gts: np.ndarray
    gt_classes: np.ndarray
    appearance: np.ndarray
    regression: np.ndarray
    coarse: tuple  # (scale, FeatureMap) of the coarsest level
    native_size: tuple

    @property
    def proposals(self) -> np.ndarray:
        return self.boxes[: self.n_proposals]


def _training_samples(image: ImageRecord, source: FeatureSource, config: ExperimentConfig) -> ImageSamples:
    pyr = source.pyramid(image)
    w, h = pyr.native_image_size
    props = clip_boxes(source.manifest.load_proposals(image), w, h)
    keep = ~image.difficult
    gts, gcls = image.boxes[keep], image.classes[keep]
    boxes = np.vstack([props, gts])
    app, _ = build_descriptors(pyr, boxes, config.region_specs, config.grid, config.target_side)
    reg, _ = build_descriptors(pyr, props, [regression_spec(config)], config.regression_grid, config.target_side)
    return ImageSamples(image.image_id, boxes, len(props), gts, gcls, app, reg, pyr.levels[0], (w, h))


@dataclass
class TrainingReport:
    n_images: int = 0
    n_samples: int = 0
    svm: dict = None
    regressor_samples: int = 0
    regressor_loss: float = float("nan")
    foreground_loss: Optional[float] = None
    heads: dict = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def train_model(manifest: DatasetManifest, config: ExperimentConfig, source: Optional[FeatureSource] = None,
                split: str = "train", workers: Optional[int] = None) -> tuple[ModelBundle, TrainingReport]:
    """Train every model component on the ``split`` images."""
    source = source or FeatureSource.from_config(manifest, config)
    images = _sorted(manifest.split(split))
    if not images:
        raise DataError(f"no images in split {split!r}")
    k = manifest.n_classes
    seed = config.seed
    samples = _pool_map(partial(_training_samples, source=source, config=config), images, workers or config.workers)
    report = TrainingReport(n_images=len(samples), svm={}, heads={})

    foreground = None
    semantic = []
    if config.use_semantic:
        fg_train = [(s.coarse[1], targets_for_map(s.gts, s.coarse[1], k, s.gt_classes)) for s in samples]
        foreground = train_foreground_scorer(fg_train, config.foreground(), seed)
        report.foreground_loss = foreground.final_loss
        for s in samples:
            fgp = foreground_pyramid(foreground, ScalePyramid((s.coarse,), s.native_size))
            semantic.append(semantic_descriptors(fgp, s.boxes, config.semantic_grid, config.semantic_target_side)[0])

    x = np.vstack([np.hstack([s.appearance, semantic[i]]) if semantic else s.appearance
                   for i, s in enumerate(samples)]).astype(np.float64)
    report.n_samples = len(x)
    specs = config.region_specs
    channels = samples[0].coarse[1].channels
    layout = descriptor_layout(specs, channels, config.grid)
    if config.use_semantic:
        layout = layout + semantic_layout(k, config.semantic_grid)

    # row bookkeeping: which rows are proposals / gts, with per-row labels
    offsets = np.cumsum([0] + [len(s.boxes) for s in samples])
    is_gt = np.zeros(len(x), bool)
    gt_class = np.full(len(x), -1)
    softmax_y = np.full(len(x), -1)
    for s, off in zip(samples, offsets):
        is_gt[off + s.n_proposals: off + len(s.boxes)] = True
        gt_class[off + s.n_proposals: off + len(s.boxes)] = s.gt_classes
        lab = label_samples(s.boxes, s.gts, s.gt_classes, "softmax")
        y = np.where(lab.positive, lab.class_id + 1, np.where(lab.negative, 0, -1))
        softmax_y[off: off + len(s.boxes)] = y

    heads = {}
    if config.train_heads:
        used = softmax_y >= 0
        for i, (spec, (lo, hi)) in enumerate(zip(specs, layout.offsets())):
            try:
                head = train_softmax_head(x[used, lo:hi], softmax_y[used], k + 1, config.softmax(), seed + i)
            except DegenerateDataError as exc:
                log.warning("skipping region head %s: %s", spec.label, exc)
                continue
            heads[spec.label] = head
            report.heads[spec.label] = head.final_loss

    scaler = FeatureScaler.fit(x)
    xs = scaler.transform(x)
    weights = np.zeros((k, x.shape[1]))
    bias = np.zeros(k)
    for c in range(k):
        pos = np.flatnonzero(is_gt & (gt_class == c))
        if len(pos) == 0:
            raise DegenerateDataError(f"class {manifest.class_names[c]!r} has no training objects")
        neg = []
        for s, off in zip(samples, offsets):
            lab = label_samples(s.proposals, s.gts[s.gt_classes == c], None, "svm")
            neg.append(off + np.flatnonzero(lab.negative))
        neg = np.concatenate(neg)
        mined = train_svm_hard_negative(xs[pos], xs[neg], config.svm(), seed=seed + c)
        w, b = scaler.fold(mined.weights, mined.bias)
        weights[c], bias[c] = w, b
        report.svm[manifest.class_names[c]] = {"positives": int(len(pos)), "pool": int(len(neg)),
                                               "active": int(len(mined.active)), "rounds": mined.rounds,
                                               "converged": bool(mined.converged)}

    rx, rt, rc = [], [], []
    for s in samples:
        lab = label_samples(s.proposals, s.gts, s.gt_classes, "regression")
        keep = lab.positive
        rx.append(s.regression[keep])
        rt.append(lab.targets[keep])
        rc.append(lab.class_id[keep])
    rx, rt, rc = np.vstack(rx), np.vstack(rt), np.concatenate(rc)
    regressor = train_regressor(rx, rt, rc, k, config.regressor(), seed, hidden=config.regressor_hidden)
    report.regressor_samples = len(rx)
    report.regressor_loss = regressor.final_loss

    bundle = ModelBundle(
        class_names=manifest.class_names,
        specs=specs,
        grid=tuple(config.grid),
        target_side=config.target_side,
        layout=layout,
        classifier=LinearHead(weights, bias),
        regressor=regressor,
        regression_layout=descriptor_layout([regression_spec(config)], channels, config.regression_grid),
        regression_spec=regression_spec(config),
        regression_grid=tuple(config.regression_grid),
        heads=heads,
        foreground=foreground,
        semantic_grid=tuple(config.semantic_grid),
        semantic_target_side=config.semantic_target_side,
        config=config.to_dict(),
    )
    return bundle, report


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------


def _detect_one(image: ImageRecord, source: FeatureSource, bundle: ModelBundle, config: ExperimentConfig) -> dict:
    pyr = source.pyramid(image)
    props = source.manifest.load_proposals(image)
    found = detect(pyr, props, bundle, config.localization())
    scene = SceneModel(bundle, pyr)
    clipped = scene.clip(props)
    initial = scene.scores(clipped)
    per_class = {}
    for c, name in enumerate(bundle.class_names):
        cs = found[c]
        per_class[name] = [{"x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3]),
                            "score": float(s)} for s, b in zip(cs.scores, cs.boxes)]
    return {
        "image": image.image_id,
        "detections": per_class,
        "proposals": {"boxes": clipped.tolist(), "scores": initial.tolist()},
    }


def detect_images(manifest: DatasetManifest, bundle: ModelBundle, config: ExperimentConfig,
                  source: Optional[FeatureSource] = None, split: Optional[str] = "test",
                  workers: Optional[int] = None) -> list[dict]:
    """Per-image detection records in image-id order."""
    source = source or FeatureSource.from_config(manifest, config)
    images = _sorted(manifest.split(split))
    fn = partial(_detect_one, source=source, bundle=bundle, config=config)
    return _pool_map(fn, images, workers or config.workers)


def write_detections(records: Sequence[dict], out_dir, run: Optional[dict] = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        p = out_dir / f"{rec['image']}.json"
        p.write_text(json.dumps(rec, sort_keys=True) + "\n")
        paths.append(p)
    index = {"format_version": 1, "images": [r["image"] for r in records], "run": run}
    (out_dir / "index.json").write_text(dumps_json(index))
    return paths


def read_detections(det_dir, images: Sequence[ImageRecord]) -> list[dict]:
    det_dir = Path(det_dir)
    out = []
    for im in _sorted(images):
        p = det_dir / f"{im.image_id}.json"
        if not p.is_file():
            raise DataError(f"missing detection file {p}")
        try:
            out.append(json.loads(p.read_text()))
        except ValueError as exc:
            raise DataError(f"malformed detection file {p}: {exc}") from exc
    return out


def records_to_eval_inputs(records: Sequence[dict], class_names: Sequence[str]) -> tuple[dict, dict]:
    """Detections and proposal scores keyed ``[image][class_id] -> (scores, boxes)``."""
    dets, props = {}, {}
    for rec in records:
        per = {}
        for c, name in enumerate(class_names):
            items = rec["detections"].get(name, [])
            per[c] = (np.array([d["score"] for d in items], float),
                      np.array([[d["x1"], d["y1"], d["x2"], d["y2"]] for d in items], float).reshape(-1, 4))
        dets[rec["image"]] = per
        p = rec.get("proposals")
        if p is not None:
            boxes = np.asarray(p["boxes"], float).reshape(-1, 4)
            scores = np.asarray(p["scores"], float).reshape(len(boxes), -1)
            props[rec["image"]] = {c: (scores[:, c], boxes) for c in range(scores.shape[1])}
    return dets, props


# ---------------------------------------------------------------------------
# Evaluation and analysis
# ---------------------------------------------------------------------------


def truths_for(images: Sequence[ImageRecord]) -> dict:
    return {im.image_id: im.truth() for im in images}


def evaluate_records(manifest: DatasetManifest, records: Sequence[dict], config: ExperimentConfig,
                     thresholds=(0.5, 0.7)):
    images = [im for im in manifest.images if im.image_id in {r["image"] for r in records}]
    dets, props = records_to_eval_inputs(records, manifest.class_names)
    eval_cfg = config.evaluation(manifest.similarity_groups())
    metrics = evaluate(dets, truths_for(images), manifest.class_names, eval_cfg, thresholds, props or None)
    return metrics, eval_cfg


def write_metrics(metrics, eval_cfg, out_dir, run: Optional[dict] = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "metrics.csv", out_dir / "metrics.json"
    csv_path.write_text(metrics_csv(metrics))
    json_path.write_text(dumps_json(metrics_summary(metrics, eval_cfg, {"run": run})))
    return csv_path, json_path


FP_COUNTS = (25, 50, 100, 200, 400, 800, 1600, 3200)


def class_matches(manifest: DatasetManifest, records: Sequence[dict], config: ExperimentConfig) -> list[MatchResult]:
    """Pooled matches per class at the configured IoU threshold."""
    images = {im.image_id: im for im in manifest.images}
    dets, _ = records_to_eval_inputs(records, manifest.class_names)
    groups = manifest.similarity_groups()
    out = []
    for c in range(manifest.n_classes):
        per = []
        for rec in records:
            t = images[rec["image"]].truth()
            s, b = dets[rec["image"]][c]
            per.append(match_detections(s, b, c, t.boxes, t.classes, t.difficult, config.iou, groups))
        out.append(MatchResult.concat(per))
    return out


def false_positive_trend(matches: MatchResult, counts: Sequence[int] = FP_COUNTS) -> list[dict]:
    """Share of each error type among the top-k false positives, for each k."""
    kinds = {Outcome.LOC: "Loc", Outcome.DUP: "Loc", Outcome.SIM: "Sim", Outcome.OTH: "Oth", Outcome.BG: "BG"}
    fps = [kinds[Outcome(int(o))] for o in matches.outcomes if Outcome(int(o)) in kinds]
    rows = []
    for k in counts:
        top = fps[:k]
        if not top:
            break
        rows.append({"k": len(top), **{c: top.count(c) / len(top) for c in REPORT_CATEGORIES[1:]}})
        if len(top) < k:
            break
    return rows


def analyze(manifest: DatasetManifest, records: Sequence[dict], config: ExperimentConfig, out_dir,
            run: Optional[dict] = None) -> dict:
    """Error breakdown of the top-ranked detections and plot-ready CSV tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    matches = class_matches(manifest, records, config)
    report = {"format_version": 1, "iou_threshold": config.iou, "classes": {}, "run": run}
    lines = ["class,n," + ",".join(c.lower() for c in REPORT_CATEGORIES)]
    trend = ["class,k," + ",".join(c.lower() for c in REPORT_CATEGORIES[1:])]
    for name, m in zip(manifest.class_names, matches):
        rep = error_report(m)
        fp = false_positive_trend(m)
        report["classes"][name] = {"top_n": rep, "false_positive_trend": fp}
        lines.append(f"{name},{rep['n']}," + ",".join(f"{rep[c]:.6f}" for c in REPORT_CATEGORIES))
        trend.extend(f"{name},{r['k']}," + ",".join(f"{r[c]:.6f}" for c in REPORT_CATEGORIES[1:]) for r in fp)
    (out_dir / "analysis.json").write_text(dumps_json(report))
    (out_dir / "error_breakdown.csv").write_text("\n".join(lines) + "\n")
    (out_dir / "fp_trend.csv").write_text("\n".join(trend) + "\n")
    return report


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

ABLATION_VARIANTS = (("A", "a,i"), ("B", "a,rect:1.5"))


def run_config(manifest: DatasetManifest, config: ExperimentConfig, source: Optional[FeatureSource] = None,
               thresholds=(0.5, 0.7)):
    """Train on the train split, detect and evaluate on the test split."""
    source = source or FeatureSource.from_config(manifest, config)
    bundle, report = train_model(manifest, config, source)
    records = detect_images(manifest, bundle, config, source, split="test")
    metrics, _ = evaluate_records(manifest, records, config, thresholds)
    return bundle, report, records, metrics


def run_ablation_pair(manifest: DatasetManifest, config: ExperimentConfig, source: Optional[FeatureSource] = None,
                      variants=ABLATION_VARIANTS) -> dict:
    """Compare two-region models; by default the box plus a context ring (A)
    against the box plus a solid box of the ring's outer size (B).

    Both variants share every other setting, with the semantic block off, so
    the difference isolates masking the centre of the context region.
    """
    source = source or FeatureSource.from_config(manifest, config)
    (name_a, regions_a), (name_b, regions_b) = variants
    out = {"format_version": 1, "seed": config.seed, "config_hash": config.hash(), "variants": {}}
    for name, regions in ((name_a, regions_a), (name_b, regions_b)):
        cfg = config.replace(regions=regions, use_semantic=False, train_heads=False)
        _, _, _, metrics = run_config(manifest, cfg, source)
        out["variants"][name] = {
            "regions": regions,
            "config_hash": cfg.hash(),
            "mAP": {f"{t:g}": mean_ap(metrics, t) for t in (0.5, 0.7)},
            "ap": {m.name: {f"{t:g}": v for t, v in sorted(m.ap.items())} for m in metrics},
        }
    a = out["variants"][name_a]["mAP"]["0.5"]
    b = out["variants"][name_b]["mAP"]["0.5"]
    out["difference"] = None if a is None or b is None else a - b
    return out
