"""Trained model container: scoring, box refinement, and on-disk persistence.

On disk a bundle is a directory holding ``model.json`` (versions, dims,
region specs, array index, config snapshot) and ``weights.bin``: all arrays
as little-endian float32, row-major, back to back, followed by a CRC32 of
the preceding bytes.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from ..errors import ModelFormatError, ShapeMismatchError
from ..geometry import BoundingBox, RegionKind, RegionSpec, as_box_array, decode_boxes
from ..pooling import DescriptorLayout, RegionDescriptor
from ..weaksup import ForegroundScorer
from .heads import MAX_LOG_SCALE, LinearHead, Regressor

FORMAT_NAME = "multiregion-bundle"
FORMAT_VERSION = 1
MANIFEST = "model.json"
BLOB = "weights.bin"
REGRESSION_SCALE = 1.3
SEMANTIC_NOTE = (
    "semantic block pools K per-class foreground probability maps (channels = classes), "
    "standing in for learned segmentation features"
)


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Everything needed to score and refine candidates for one class set.

    ``layout`` describes the classifier input: appearance blocks followed by
    the semantic block when ``foreground`` is set.
    """

    class_names: tuple
    specs: tuple
    grid: tuple
    target_side: float
    layout: DescriptorLayout
    classifier: LinearHead
    regressor: Regressor
    regression_layout: DescriptorLayout
    regression_spec: RegionSpec = RegionSpec(RegionKind.RECT, REGRESSION_SCALE, name="regression")
    regression_grid: tuple = (7, 7)
    heads: dict = field(default_factory=dict)
    foreground: Optional[ForegroundScorer] = None
    semantic_grid: tuple = (9, 9)
    semantic_target_side: float = 288.0
    semantic_scales: Optional[tuple] = None  # None: coarsest level only
    config: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "specs", tuple(self.specs))
        if self.classifier.input_dim != self.layout.length:
            raise ShapeMismatchError(
                f"classifier input {self.classifier.input_dim} != layout length {self.layout.length}"
            )
        if self.classifier.n_outputs != self.n_classes:
            raise ShapeMismatchError(f"classifier has {self.classifier.n_outputs} rows for {self.n_classes} classes")
        if self.regressor.input_dim != self.regression_layout.length:
            raise ShapeMismatchError(
                f"regressor input {self.regressor.input_dim} != regression layout {self.regression_layout.length}"
            )
        if self.regressor.n_classes != self.n_classes:
            raise ShapeMismatchError(f"regressor covers {self.regressor.n_classes} classes, bundle {self.n_classes}")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def use_semantic(self) -> bool:
        return self.foreground is not None


# ---------------------------------------------------------------------------
# Scoring and refinement
# ---------------------------------------------------------------------------


def _describe(layout: DescriptorLayout) -> str:
    return ", ".join(f"{b.name}[{b.channels}x{b.grid_h}x{b.grid_w}]" for b in layout.blocks)


def check_layout(expected: DescriptorLayout, descriptor) -> np.ndarray:
    """Return the descriptor as an ``(n, D)`` matrix or raise naming the offending block."""
    if isinstance(descriptor, RegionDescriptor):
        got = descriptor.layout
        for i, (a, b) in enumerate(zip(expected.blocks, got.blocks)):
            if a != b:
                raise ShapeMismatchError(f"descriptor block {i} is {b.name!r} {b}, model expects {a.name!r} {a}")
        if len(got.blocks) != len(expected.blocks):
            extra = got.blocks[len(expected.blocks):] or expected.blocks[len(got.blocks):]
            raise ShapeMismatchError(
                f"descriptor has {len(got.blocks)} blocks, model expects {len(expected.blocks)}; "
                f"first unmatched block {extra[0].name!r}"
            )
        x = descriptor.vector
    else:
        x = descriptor
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    d = x.shape[-1]
    if x.ndim != 2 or d != expected.length:
        where = "past the last block"
        for b, (lo, hi) in zip(expected.blocks, expected.offsets()):
            if d < hi:
                where = f"inside block {b.name!r} (values {lo}..{hi})"
                break
        raise ShapeMismatchError(
            f"descriptor length {d} != expected {expected.length}; it ends {where}; layout: {_describe(expected)}"
        )
    return x


def score(bundle: ModelBundle, descriptor) -> np.ndarray:
    """Per-class classifier scores, ``(K,)`` for one descriptor or ``(n, K)`` for a matrix."""
    x = check_layout(bundle.layout, descriptor)
    s = bundle.classifier.scores(x)
    single = isinstance(descriptor, RegionDescriptor) or np.ndim(descriptor) == 1
    return s[0] if single else s


def refine_boxes(targets: np.ndarray, boxes) -> np.ndarray:
    """Decode ``(n, K, 4)`` targets against ``(n, 4)`` boxes into ``(n, K, 4)`` boxes."""
    boxes = as_box_array(boxes)
    t = np.array(targets, dtype=np.float64, copy=True)
    n, k, _ = t.shape
    t[..., 2:] = np.clip(t[..., 2:], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    rep = np.repeat(boxes, k, axis=0)
    return decode_boxes(rep, t.reshape(n * k, 4)).reshape(n, k, 4)


def regress_boxes(bundle: ModelBundle, descriptors, boxes) -> np.ndarray:
    """Refined boxes for every class, ``(n, K, 4)``.

    ``descriptors`` must come from the enlarged regression region; targets
    decode against the original ``boxes``.
    """
    x = check_layout(bundle.regression_layout, descriptors)
    return refine_boxes(bundle.regressor.predict(x), boxes)


def regress(bundle: ModelBundle, descriptor, candidate: BoundingBox, class_id: int) -> BoundingBox:
    out = regress_boxes(bundle, descriptor, candidate.as_array())
    return BoundingBox.from_array(out[0, class_id], class_id=class_id)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _arrays(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    out = [("classifier.weights", bundle.classifier.weights), ("classifier.bias", bundle.classifier.bias)]
    for key in sorted(bundle.regressor.params):
        out.append((f"regressor.{key}", bundle.regressor.params[key]))
    for label in sorted(bundle.heads):
        out.append((f"heads.{label}.weights", bundle.heads[label].weights))
        out.append((f"heads.{label}.bias", bundle.heads[label].bias))
    if bundle.foreground is not None:
        out.append(("foreground.weights", bundle.foreground.weights))
        out.append(("foreground.bias", bundle.foreground.bias))
    return out


def save_bundle(bundle: ModelBundle, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, arr in _arrays(bundle):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    crc = zlib.crc32(payload)
    manifest = {
        "format": FORMAT_NAME,
        "format_version": bundle.format_version,
        "class_names": list(bundle.class_names),
        "specs": [s.to_dict() for s in bundle.specs],
        "grid": list(bundle.grid),
        "target_side": bundle.target_side,
        "layout": bundle.layout.to_list(),
        "regression": {
            "spec": bundle.regression_spec.to_dict(),
            "grid": list(bundle.regression_grid),
            "layout": bundle.regression_layout.to_list(),
            "hidden": bundle.regressor.hidden,
        },
        "semantic": None if bundle.foreground is None else {
            "grid": list(bundle.semantic_grid),
            "target_side": bundle.semantic_target_side,
            "scales": None if bundle.semantic_scales is None else list(bundle.semantic_scales),
            "note": SEMANTIC_NOTE,
        },
        "heads": sorted(bundle.heads),
        "final_losses": {
            "classifier": _finite(bundle.classifier.final_loss),
            "regressor": _finite(bundle.regressor.final_loss),
            **{f"head.{k}": _finite(h.final_loss) for k, h in sorted(bundle.heads.items())},
        },
        "arrays": index,
        "blob": BLOB,
        "blob_bytes": len(payload),
        "blob_crc32": crc,
        "config": bundle.config,
    }
    (directory / BLOB).write_bytes(payload + crc.to_bytes(4, "little"))
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def _finite(v: float):
    return None if v is None or not np.isfinite(v) else float(v)


def load_bundle(directory: Union[str, Path]) -> ModelBundle:
    directory = Path(directory)
    mpath = directory / MANIFEST
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise ModelFormatError(f"no model manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{mpath} is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise ModelFormatError(f"{mpath} is not a {FORMAT_NAME} manifest")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported bundle version {manifest.get('format_version')}")
    bpath = directory / manifest.get("blob", BLOB)
    try:
        raw = bpath.read_bytes()
    except FileNotFoundError as exc:
        raise ModelFormatError(f"missing weight blob {bpath}") from exc
    size = int(manifest["blob_bytes"])
    if len(raw) != size + 4:
        raise ModelFormatError(f"{bpath} holds {len(raw)} bytes, manifest declares {size} + 4")
    payload, crc = raw[:size], int.from_bytes(raw[size:], "little")
    if zlib.crc32(payload) != crc or crc != manifest["blob_crc32"]:
        raise ModelFormatError(f"CRC32 mismatch in {bpath}")
    arrays = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        off = int(entry["offset"])
        if off + 4 * count > size:
            raise ModelFormatError(f"array {entry['name']} runs past the end of {bpath}")
        arrays[entry["name"]] = np.frombuffer(payload, "<f4", count=count, offset=off).reshape(shape).copy()
    try:
        losses = manifest.get("final_losses", {})

        def loss(key):
            v = losses.get(key)
            return float("nan") if v is None else v

        classifier = LinearHead(arrays["classifier.weights"], arrays["classifier.bias"], loss("classifier"))
        reg_params = {k.split(".", 1)[1]: v for k, v in arrays.items() if k.startswith("regressor.")}
        regressor = Regressor(reg_params, len(manifest["class_names"]), loss("regressor"))
        heads = {
            label: LinearHead(arrays[f"heads.{label}.weights"], arrays[f"heads.{label}.bias"], loss(f"head.{label}"))
            for label in manifest["heads"]
        }
        sem = manifest.get("semantic")
        foreground = None
        if sem is not None:
            foreground = ForegroundScorer(arrays["foreground.weights"], arrays["foreground.bias"])
        reg = manifest["regression"]
        return ModelBundle(
            class_names=tuple(manifest["class_names"]),
            specs=tuple(RegionSpec.from_dict(d) for d in manifest["specs"]),
            grid=tuple(manifest["grid"]),
            target_side=float(manifest["target_side"]),
            layout=DescriptorLayout.from_list(manifest["layout"]),
            classifier=classifier,
            regressor=regressor,
            regression_layout=DescriptorLayout.from_list(reg["layout"]),
            regression_spec=RegionSpec.from_dict(reg["spec"]),
            regression_grid=tuple(reg["grid"]),
            heads=heads,
            foreground=foreground,
            semantic_grid=tuple(sem["grid"]) if sem else (9, 9),
            semantic_target_side=float(sem["target_side"]) if sem else 288.0,
            semantic_scales=None if not sem or sem["scales"] is None else tuple(sem["scales"]),
            config=manifest.get("config", {}),
            format_version=manifest["format_version"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed bundle manifest {mpath}: {exc}") from exc
