"""Dataset manifests and the synthetic scene generator.

A dataset directory holds ``manifest.json`` plus the files it points to:
grayscale rasters (PGM) and one JSON proposal list per image. Paths in the
manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DataError
from ..evaluation import ImageTruth
from ..featmap import load_image, save_pgm
from ..geometry import as_box_array, clip_boxes

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1

SYNTHETIC_CLASSES = (
    ("disk", "round"),
    ("ring", "round"),
    ("vstripes", "striped"),
    ("hstripes", "striped"),
)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    raster: str
    proposals: str
    boxes: np.ndarray  # (n, 4)
    classes: np.ndarray  # (n,)
    difficult: np.ndarray  # (n,) bool
    split: str = "train"

    def truth(self) -> ImageTruth:
        return ImageTruth(self.boxes, self.classes, self.difficult)


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    class_names: tuple
    class_groups: tuple
    images: tuple
    generator: Optional[dict] = None

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def similarity_groups(self) -> dict:
        return {i: g for i, g in enumerate(self.class_groups) if g}

    def split(self, name: Optional[str]) -> list[ImageRecord]:
        if name in (None, "all"):
            return list(self.images)
        return [im for im in self.images if im.split == name]

    def path(self, relative: str) -> Path:
        return self.root / relative

    def load_raster(self, image: ImageRecord) -> np.ndarray:
        p = self.path(image.raster)
        if not p.is_file():
            raise DataError(f"missing raster {p}")
        try:
            return load_image(p)
        except Exception as exc:  # Pillow raises a zoo of types
            raise DataError(f"cannot read raster {p}: {exc}") from exc

    def load_proposals(self, image: ImageRecord) -> np.ndarray:
        p = self.path(image.proposals)
        if not p.is_file():
            raise DataError(f"missing proposal file {p}")
        try:
            data = json.loads(p.read_text())
            boxes = np.asarray(data["boxes"], dtype=np.float64).reshape(-1, 4)
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"malformed proposal file {p}: {exc}") from exc
        if not np.isfinite(boxes).all():
            raise DataError(f"non-finite proposal coordinates in {p}")
        return boxes

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "classes": [{"id": i, "name": n, "group": g}
                        for i, (n, g) in enumerate(zip(self.class_names, self.class_groups))],
            "images": [
                {
                    "id": im.image_id,
                    "width": im.width,
                    "height": im.height,
                    "raster": im.raster,
                    "proposals": im.proposals,
                    "split": im.split,
                    "objects": [
                        {"box": [float(v) for v in b], "class": int(c), "difficult": bool(d)}
                        for b, c, d in zip(im.boxes, im.classes, im.difficult)
                    ],
                }
                for im in self.images
            ],
            "generator": self.generator,
        }


def load_manifest(path) -> DatasetManifest:
    """Load ``manifest.json`` from a file path or a dataset directory."""
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST_NAME
    if not p.is_file():
        raise DataError(f"missing dataset manifest {p}")
    try:
        data = json.loads(p.read_text())
        if data.get("format_version") != FORMAT_VERSION:
            raise DataError(f"{p}: unsupported manifest format_version {data.get('format_version')!r}")
        classes = sorted(data["classes"], key=lambda c: int(c["id"]))
        if [int(c["id"]) for c in classes] != list(range(len(classes))):
            raise DataError(f"{p}: class ids must be 0..K-1")
        images = []
        for im in data["images"]:
            objs = im.get("objects", [])
            boxes = as_box_array([o["box"] for o in objs]) if objs else np.zeros((0, 4))
            cls = np.array([int(o["class"]) for o in objs], dtype=np.int64)
            if len(cls) and (cls.min() < 0 or cls.max() >= len(classes)):
                raise DataError(f"{p}: image {im['id']} has an object with an unknown class")
            images.append(ImageRecord(
                str(im["id"]), int(im["width"]), int(im["height"]), im["raster"], im["proposals"],
                boxes, cls, np.array([bool(o.get("difficult", False)) for o in objs], dtype=bool),
                im.get("split", "train"),
            ))
    except DataError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {p}: {exc}") from exc
    ids = [im.image_id for im in images]
    if len(set(ids)) != len(ids):
        raise DataError(f"{p}: duplicate image ids")
    return DatasetManifest(p.parent, tuple(c["name"] for c in classes), tuple(c.get("group", "") for c in classes),
                           tuple(images), data.get("generator"))


def write_manifest(manifest: DatasetManifest) -> Path:
    p = manifest.root / MANIFEST_NAME
    p.write_text(json.dumps(manifest.to_dict(), indent=1, sort_keys=True) + "\n")
    return p


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

STRIPE_PERIOD = 10
OBJECT_SIDE = (56, 150)
FOREGROUND = 0.85


def _draw_object(img: np.ndarray, box, cls: int, rng) -> None:
    x1, y1, x2, y2 = (int(v) for v in box)
    h, w = y2 - y1, x2 - x1
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (h - 1) / 2, (w - 1) / 2
    r = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2
    patch = img[y1:y2, x1:x2]
    level = FOREGROUND + rng.uniform(-0.05, 0.05)
    name = SYNTHETIC_CLASSES[cls][0]
    if name == "disk":
        patch[r <= 1] = level
    elif name == "ring":
        patch[(r <= 1) & (r >= 0.45)] = level
    else:
        phase = int(rng.integers(0, STRIPE_PERIOD))
        coord = xx if name == "vstripes" else yy
        on = ((coord + phase) // (STRIPE_PERIOD // 2)) % 2 == 0
        patch[:] = np.where(on, level, 0.15)


def _draw_distractor(img: np.ndarray, rng) -> None:
    """A large flat plate: bright like object interiors but without their outline."""
    h, w = img.shape
    pw, ph = int(rng.integers(w // 5, w * 2 // 5)), int(rng.integers(h // 4, h // 2))
    x, y = int(rng.integers(0, w - pw)), int(rng.integers(0, h - ph))
    img[y:y + ph, x:x + pw] = FOREGROUND + rng.uniform(-0.05, 0.05)


def _place(rng, taken: list, width: int, height: int, tries: int = 50):
    for _ in range(tries):
        bw = float(rng.integers(*OBJECT_SIDE))
        bh = float(np.clip(bw * rng.uniform(0.75, 1.33), *OBJECT_SIDE))
        x1 = float(rng.integers(0, int(width - bw)))
        y1 = float(rng.integers(0, int(height - bh)))
        box = np.array([x1, y1, x1 + bw, y1 + bh])
        # keep a gap so objects never overlap
        if all(box[0] > t[2] + 8 or box[2] < t[0] - 8 or box[1] > t[3] + 8 or box[3] < t[1] - 8 for t in taken):
            return box
    return None


def jitter_proposals(gts, n: int, clutter: float, width: int, height: int, rng) -> np.ndarray:
    """Exactly ``n`` proposals: jittered copies of ground truth plus a ``clutter`` share of random boxes.

    Jitter moves each center by up to 30% of the box side and rescales each
    side by a factor in [0.7, 1.4]. Boxes are clipped to the image.
    """
    gts = as_box_array(gts)
    n_clutter = int(round(clutter * n)) if len(gts) else n
    n_jit = n - n_clutter
    out = np.zeros((n, 4))
    if n_jit:
        src = gts[np.arange(n_jit) % len(gts)]
        w, h = src[:, 2] - src[:, 0], src[:, 3] - src[:, 1]
        cx = (src[:, 0] + src[:, 2]) / 2 + rng.uniform(-0.3, 0.3, n_jit) * w
        cy = (src[:, 1] + src[:, 3]) / 2 + rng.uniform(-0.3, 0.3, n_jit) * h
        nw, nh = w * rng.uniform(0.7, 1.4, n_jit), h * rng.uniform(0.7, 1.4, n_jit)
        out[:n_jit] = np.stack([cx - nw / 2, cy - nh / 2, cx + nw / 2, cy + nh / 2], axis=1)
    if n_clutter:
        cw = rng.uniform(32, 220, n_clutter)
        ch = np.clip(cw * rng.uniform(0.6, 1.6, n_clutter), 24, height - 1)
        x1 = rng.uniform(0, width - cw)
        y1 = rng.uniform(0, height - ch)
        out[n_jit:] = np.stack([x1, y1, x1 + cw, y1 + ch], axis=1)
    return np.round(clip_boxes(out, width, height, min_size=8.0), 2)


def render_scene(rng, width: int, height: int, classes_to_draw, distractors: int, noise: float):
    """Return ``(image, boxes, classes)`` for one synthetic scene."""
    yy, xx = np.mgrid[0:height, 0:width]
    gx, gy = rng.uniform(-0.1, 0.1, 2)
    img = 0.4 + gx * (xx / width - 0.5) + gy * (yy / height - 0.5)
    for _ in range(distractors):
        _draw_distractor(img, rng)
    boxes, classes = [], []
    for cls in classes_to_draw:
        box = _place(rng, boxes, width, height)
        if box is None:
            break
        img[int(box[1]):int(box[3]), int(box[0]):int(box[2])] = 0.4  # objects sit on a clear patch
        _draw_object(img, box, cls, rng)
        boxes.append(box)
        classes.append(cls)
    img = img + rng.normal(0, noise, img.shape)
    return np.clip(img, 0, 1), np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64)


def generate_synthetic(root, config) -> DatasetManifest:
    """Write a synthetic dataset under ``root``; identical bytes for identical configs."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "proposals").mkdir(exist_ok=True)
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_images)
    n_train = int(round(config.n_images * config.train_fraction))
    images = []
    k = len(SYNTHETIC_CLASSES)
    next_class = 0  # classes rotate so even tiny corpora cover all of them
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        image_id = f"img_{i:05d}"
        n_obj = int(rng.integers(config.objects_min, config.objects_max + 1))
        wanted = [(next_class + j) % k for j in range(n_obj)]
        img, boxes, classes = render_scene(rng, config.image_width, config.image_height, wanted,
                                           config.distractors, config.noise)
        next_class = (next_class + len(classes)) % k
        props = jitter_proposals(boxes, config.proposals_per_image, config.clutter,
                                 config.image_width, config.image_height, rng)
        raster = f"images/{image_id}.pgm"
        prop_path = f"proposals/{image_id}.json"
        save_pgm(img, root / raster)
        (root / prop_path).write_text(json.dumps({"image": image_id, "boxes": props.tolist()}) + "\n")
        images.append(ImageRecord(image_id, config.image_width, config.image_height, raster, prop_path,
                                  boxes, classes, np.zeros(len(classes), bool),
                                  "train" if i < n_train else "test"))
    generator = {
        "kind": "synthetic",
        "seed": config.seed,
        "n_images": config.n_images,
        "proposals_per_image": config.proposals_per_image,
        "clutter": config.clutter,
        "distractors": config.distractors,
        "noise": config.noise,
        "objects": [config.objects_min, config.objects_max],
    }
    manifest = DatasetManifest(root, tuple(n for n, _ in SYNTHETIC_CLASSES),
                               tuple(g for _, g in SYNTHETIC_CLASSES), tuple(images), generator)
    write_manifest(manifest)
    return manifest
