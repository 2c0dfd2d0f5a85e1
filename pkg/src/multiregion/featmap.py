"""Activation maps: the multi-scale pyramid and the providers that fill it.

A :class:`FeatureMap` holds a ``(C, H, W)`` float32 tensor computed on an
image resampled by ``image_scale``; one map cell covers ``stride`` pixels of
that resampled image. Boxes handed to this module are always in *native*
image coordinates and are rescaled on projection.

Providers:

* :func:`toy_extract` - a fixed four-channel feature bank standing in for a
  convolutional trunk (intensity, |d/dx|, |d/dy|, 3x3 local variance);
* :func:`import_feature_maps` / :func:`export_feature_maps` - the ``MRFM``
  binary format for externally computed activations.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import _kernels
from .errors import (
    EmptyRegionError,
    FeatureFormatError,
    InvalidArgumentError,
    TruncatedPayloadError,
)
from .geometry import BoundingBox, as_box_array

DEFAULT_SCALES = (480, 576, 688, 874, 1200, 1600, 2100)
DEFAULT_STRIDE = 16
DEFAULT_TARGET_SIDE = 224.0

TOY_CHANNELS = ("intensity", "grad_x", "grad_y", "local_var")


@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray
    stride: float
    scale_id: int = 0
    image_scale: float = 1.0

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float32)
        if vals.ndim != 3 or min(vals.shape) < 1:
            raise InvalidArgumentError(f"feature values must be (C, H, W) with C,H,W >= 1, got {vals.shape}")
        if not self.stride > 0:
            raise InvalidArgumentError(f"stride must be positive, got {self.stride}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def cell_size(self) -> float:
        """Native image pixels per map cell."""
        return self.stride / self.image_scale


@dataclass(frozen=True, eq=False)
class ScalePyramid:
    """Feature maps of one image at several resampled sizes.

    Levels are kept sorted by ``shorter_dim`` whatever order they are given in.
    """

    levels: tuple
    native_image_size: tuple[int, int]  # (width, height)

    def __post_init__(self):
        levels = tuple(sorted(((int(s), m) for s, m in self.levels), key=lambda lv: lv[0]))
        if not levels:
            raise InvalidArgumentError("pyramid needs at least one level")
        dims = [s for s, _ in levels]
        if len(set(dims)) != len(dims):
            raise InvalidArgumentError(f"duplicate pyramid levels {dims}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "native_image_size", tuple(int(v) for v in self.native_image_size))

    @property
    def scales(self) -> list[int]:
        return [s for s, _ in self.levels]

    @property
    def maps(self) -> list[FeatureMap]:
        return [m for _, m in self.levels]

    def level(self, scale_id: int) -> FeatureMap:
        for s, m in self.levels:
            if s == scale_id:
                return m
        raise KeyError(scale_id)

    def resample_factor(self, shorter_dim: int) -> float:
        return shorter_dim / min(self.native_image_size)

    @property
    def channels(self) -> int:
        return self.levels[0][1].channels


# ---------------------------------------------------------------------------
# Toy extractor
# ---------------------------------------------------------------------------


def toy_extract(image, scales: Sequence[int] = DEFAULT_SCALES, stride: int = DEFAULT_STRIDE) -> ScalePyramid:
    """Build a pyramid from a grayscale raster with the fixed 4-channel bank.

    Each level resamples the image bilinearly so that its shorter side equals
    the scale value, computes the per-pixel channels and block-averages them
    over ``stride x stride`` pixels (partial blocks at the border are averaged
    over the pixels they have).
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InvalidArgumentError(f"expected a non-empty 2-D grayscale image, got shape {img.shape}")
    if int(stride) < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    stride = int(stride)
    img = np.ascontiguousarray(img)
    h, w = img.shape
    short = min(h, w)
    levels = []
    for s in sorted(set(int(v) for v in scales)):
        factor = s / short
        out_h = s if h == short else int(round(h * factor))
        out_w = s if w == short and h != short else int(round(w * factor))
        if (out_h, out_w) == (h, w):
            level_img = img
        else:
            level_img = _kernels.resize_bilinear(img, out_h, out_w)
        values = _kernels.feature_bank(level_img, stride)
        levels.append((s, FeatureMap(values, float(stride), scale_id=s, image_scale=factor)))
    return ScalePyramid(tuple(levels), (w, h))


# ---------------------------------------------------------------------------
# Scale selection and projection
# ---------------------------------------------------------------------------


def select_scales(pyramid: ScalePyramid, boxes, target_side: float = DEFAULT_TARGET_SIDE) -> np.ndarray:
    """Per box, the pyramid scale whose resampled box area is closest to ``target_side**2``.

    Ties go to the smaller scale.
    """
    boxes = as_box_array(boxes)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    scales = np.array(pyramid.scales, dtype=np.int64)
    factors = scales / float(min(pyramid.native_image_size))
    dist = np.abs(areas[:, None] * factors[None, :] ** 2 - float(target_side) ** 2)
    # argmin returns the first minimum and levels are sorted ascending
    return scales[np.argmin(dist, axis=1)]


def select_scale(pyramid: ScalePyramid, region_outer: BoundingBox, target_side: float = DEFAULT_TARGET_SIDE) -> int:
    return int(select_scales(pyramid, region_outer.as_array(), target_side)[0])


class CellRect(NamedTuple):
    """Half-open cell rectangle ``[x0, x1) x [y0, y1)`` on a feature map."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def n_cells(self) -> int:
        return max(self.x1 - self.x0, 0) * max(self.y1 - self.y0, 0)


def to_cell_coords(boxes, fmap: FeatureMap) -> np.ndarray:
    """Native-pixel boxes expressed in continuous map-cell units (no rounding)."""
    return as_box_array(boxes) * fmap.image_scale / fmap.stride


def project_boxes(boxes, fmap: FeatureMap) -> tuple[np.ndarray, np.ndarray]:
    """Project native-coordinate boxes to cell rectangles on ``fmap``.

    Returns ``(rects, ok)`` where ``rects`` is ``(N, 4)`` int64 and ``ok`` marks
    boxes that cover at least one cell after clipping.
    """
    cells = to_cell_coords(boxes, fmap)
    x0 = np.clip(np.floor(cells[:, 0]), 0, fmap.width)
    y0 = np.clip(np.floor(cells[:, 1]), 0, fmap.height)
    x1 = np.clip(np.ceil(cells[:, 2]), 0, fmap.width)
    y1 = np.clip(np.ceil(cells[:, 3]), 0, fmap.height)
    rects = np.stack([x0, y0, x1, y1], axis=1).astype(np.int64)
    ok = (rects[:, 2] > rects[:, 0]) & (rects[:, 3] > rects[:, 1])
    return rects, ok


def project_to_map(box: BoundingBox, fmap: FeatureMap) -> CellRect:
    rects, ok = project_boxes(box.as_array(), fmap)
    if not ok[0]:
        raise EmptyRegionError(f"box {box.as_array().tolist()} lies outside the feature map")
    return CellRect(*(int(v) for v in rects[0]))


# ---------------------------------------------------------------------------
# MRFM binary format
# ---------------------------------------------------------------------------

MAGIC = b"MRFM"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<4sII")
_LEVEL = struct.Struct("<IIIId")


def encode_feature_maps(pyramid: ScalePyramid) -> bytes:
    parts = [_HEAD.pack(MAGIC, FORMAT_VERSION, len(pyramid.levels))]
    for shorter_dim, fmap in pyramid.levels:
        c, h, w = fmap.values.shape
        parts.append(_LEVEL.pack(shorter_dim, c, h, w, float(fmap.stride)))
        parts.append(fmap.values.astype("<f4", copy=False).tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def export_feature_maps(pyramid: ScalePyramid, path) -> None:
    Path(path).write_bytes(encode_feature_maps(pyramid))


def decode_feature_maps(data: bytes, native_image_size: Optional[tuple[int, int]] = None) -> ScalePyramid:
    """Parse an ``MRFM`` blob.

    The format does not record the native image size; pass it when known (the
    dataset manifest has it). Otherwise the smallest level is taken to be the
    native resolution.
    """
    n = len(data)
    if n < _HEAD.size:
        raise TruncatedPayloadError("file shorter than header", n)
    magic, version, n_levels = _HEAD.unpack_from(data, 0)
    if magic != MAGIC:
        raise FeatureFormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    if version != FORMAT_VERSION:
        raise FeatureFormatError(f"unsupported version {version}", 4)
    if n_levels < 1:
        raise FeatureFormatError("file declares zero levels", 8)
    off = _HEAD.size
    raw_levels = []
    for _ in range(n_levels):
        if off + _LEVEL.size > n:
            raise TruncatedPayloadError("truncated level header", off)
        shorter_dim, c, h, w, stride = _LEVEL.unpack_from(data, off)
        if min(c, h, w) < 1 or not (stride > 0 and math.isfinite(stride)):
            raise FeatureFormatError(f"invalid level dims C={c} H={h} W={w} stride={stride}", off)
        off += _LEVEL.size
        nbytes = 4 * c * h * w
        if off + nbytes > n:
            raise TruncatedPayloadError(
                f"level declares {c}x{h}x{w} values but only {max(n - off, 0)} payload bytes remain", off
            )
        values = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
        off += nbytes
        raw_levels.append((shorter_dim, values.astype(np.float32), stride))
    if off + 4 > n:
        raise TruncatedPayloadError("missing CRC32 trailer", off)
    (crc,) = struct.unpack_from("<I", data, off)
    if crc != (zlib.crc32(data[:off]) & 0xFFFFFFFF):
        raise FeatureFormatError("CRC32 mismatch", off)
    if off + 4 != n:
        raise FeatureFormatError(f"{n - off - 4} trailing bytes after CRC32", off + 4)

    if native_image_size is None:
        s0, v0, _ = min(raw_levels, key=lambda lv: lv[0])
        _, h0, w0 = v0.shape
        if h0 <= w0:
            native_image_size = (int(round(s0 * w0 / h0)), s0)
        else:
            native_image_size = (s0, int(round(s0 * h0 / w0)))
    native_short = min(native_image_size)
    levels = tuple(
        (s, FeatureMap(v, stride, scale_id=s, image_scale=s / native_short)) for s, v, stride in raw_levels
    )
    return ScalePyramid(levels, native_image_size)


def import_feature_maps(path, native_image_size: Optional[tuple[int, int]] = None) -> ScalePyramid:
    return decode_feature_maps(Path(path).read_bytes(), native_image_size)


def pyramids_equal(a: ScalePyramid, b: ScalePyramid) -> bool:
    """Bit-level equality of two pyramids (values, strides and scale ids)."""
    if a.scales != b.scales:
        return False
    for (_, ma), (_, mb) in zip(a.levels, b.levels):
        if ma.stride != mb.stride or ma.values.shape != mb.values.shape:
            return False
        if ma.values.tobytes() != mb.values.tobytes():
            return False
    return True


# ---------------------------------------------------------------------------
# Image loading
# ---------------------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read a grayscale raster as float64 in [0, 1] (PGM/PNG via Pillow, or ``.npy``)."""
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr / 255.0


def save_pgm(array, path) -> None:
    """Write a 2-D array in [0, 1] (or uint8) as binary PGM."""
    from PIL import Image

    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(Path(path), format="PPM")
