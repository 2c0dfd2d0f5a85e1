"""Region adaptation front end: adaptive max pooling and descriptor assembly.

A region is projected onto the selected pyramid level (floor on the min
corner, ceil on the max corner), its cell rectangle is split into a
``grid_h x grid_w`` partition with edges ``floor(i * n / g)``, and each bin
takes the channel-wise max. For rings, cells whose centers fall strictly
inside the (unrounded) projected inner box count as zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .errors import EmptyRegionError, InvalidArgumentError
from .featmap import DEFAULT_TARGET_SIDE, FeatureMap, ScalePyramid, project_boxes, select_scales, to_cell_coords
from .geometry import BoundingBox, RegionInstance, RegionSpec, as_box_array, instantiate_regions

DEFAULT_GRID = (7, 7)
SEMANTIC_GRID = (9, 9)


@dataclass(frozen=True, eq=False)
class PooledFeature:
    values: np.ndarray  # (C, grid_h, grid_w) float32
    empty_bins: int = 0

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def grid_h(self) -> int:
        return self.values.shape[1]

    @property
    def grid_w(self) -> int:
        return self.values.shape[2]

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def _check_grid(grid) -> tuple[int, int]:
    gh, gw = (int(v) for v in grid)
    if gh < 1 or gw < 1:
        raise InvalidArgumentError(f"pooling grid must be >= 1x1, got {grid}")
    return gh, gw


def pool_regions(
    fmap: FeatureMap,
    outer,
    inner: Optional[np.ndarray] = None,
    grid=DEFAULT_GRID,
) -> tuple[np.ndarray, np.ndarray]:
    """Pool many regions from one map.

    Returns ``(values, empty_bins)`` with ``values`` of shape
    ``(N, C, grid_h, grid_w)``. Raises :class:`EmptyRegionError` naming the
    first region that misses the map entirely.
    """
    gh, gw = _check_grid(grid)
    outer = as_box_array(outer)
    rects, ok = project_boxes(outer, fmap)
    if not ok.all():
        bad = int(np.flatnonzero(~ok)[0])
        raise EmptyRegionError(
            f"region {bad} {outer[bad].tolist()} projects to no cells of a "
            f"{fmap.height}x{fmap.width} map", region=bad
        )
    n = outer.shape[0]
    if inner is None:
        inner_cells = np.zeros((n, 4), dtype=np.float64)
        has_inner = np.zeros(n, dtype=np.bool_)
    else:
        inner_cells = np.ascontiguousarray(to_cell_coords(inner, fmap))
        has_inner = np.ones(n, dtype=np.bool_)
    return _kernels.adaptive_max_pool(fmap.values, rects, inner_cells, has_inner, gh, gw)


def adaptive_max_pool(fmap: FeatureMap, region: RegionInstance, grid=DEFAULT_GRID) -> PooledFeature:
    inner = None if region.inner is None else region.inner.as_array()[None, :]
    try:
        values, empty = pool_regions(fmap, region.outer.as_array()[None, :], inner, grid)
    except EmptyRegionError as exc:
        raise EmptyRegionError(f"region {region.outer} projects to no cells", region=region) from exc
    return PooledFeature(values[0], int(empty[0]))


# ---------------------------------------------------------------------------
# Descriptor layout
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BlockInfo:
    name: str
    channels: int
    grid_h: int
    grid_w: int

    @property
    def length(self) -> int:
        return self.channels * self.grid_h * self.grid_w


@dataclass(frozen=True)
class DescriptorLayout:
    blocks: tuple

    @property
    def length(self) -> int:
        return sum(b.length for b in self.blocks)

    def offsets(self) -> list[tuple[int, int]]:
        out, pos = [], 0
        for b in self.blocks:
            out.append((pos, pos + b.length))
            pos += b.length
        return out

    def block_slice(self, name: str) -> slice:
        for b, (lo, hi) in zip(self.blocks, self.offsets()):
            if b.name == name:
                return slice(lo, hi)
        raise KeyError(name)

    def to_list(self) -> list:
        return [[b.name, b.channels, b.grid_h, b.grid_w] for b in self.blocks]

    @classmethod
    def from_list(cls, items) -> "DescriptorLayout":
        return cls(tuple(BlockInfo(str(n), int(c), int(h), int(w)) for n, c, h, w in items))

    def __add__(self, other: "DescriptorLayout") -> "DescriptorLayout":
        return DescriptorLayout(self.blocks + other.blocks)


def descriptor_layout(specs: Sequence[RegionSpec], channels: int, grid=DEFAULT_GRID) -> DescriptorLayout:
    gh, gw = _check_grid(grid)
    return DescriptorLayout(tuple(BlockInfo(s.label, channels, gh, gw) for s in specs))


@dataclass(frozen=True, eq=False)
class RegionDescriptor:
    """Concatenated per-region pooled blocks of one candidate box."""

    vector: np.ndarray
    layout: DescriptorLayout

    def block(self, name: str) -> np.ndarray:
        return self.vector[self.layout.block_slice(name)]

    @property
    def blocks(self) -> list[np.ndarray]:
        return [self.vector[lo:hi] for lo, hi in self.layout.offsets()]


def build_descriptors(
    pyramid: ScalePyramid,
    boxes,
    specs: Sequence[RegionSpec],
    grid=DEFAULT_GRID,
    target_side: float = DEFAULT_TARGET_SIDE,
) -> tuple[np.ndarray, DescriptorLayout]:
    """Descriptors for many candidates at once: ``(N, D)`` float32 plus the layout.

    Each region picks its own pyramid level (rings by their outer box).
    """
    if not specs:
        raise InvalidArgumentError("at least one region spec is required")
    gh, gw = _check_grid(grid)
    boxes = as_box_array(boxes)
    layout = descriptor_layout(specs, pyramid.channels, (gh, gw))
    n = boxes.shape[0]
    out = np.zeros((n, layout.length), dtype=np.float32)
    if n == 0:
        return out, layout
    for spec, (lo, hi) in zip(specs, layout.offsets()):
        outer, inner = instantiate_regions(spec, boxes)
        chosen = select_scales(pyramid, outer, target_side)
        for scale in np.unique(chosen):
            idx = np.flatnonzero(chosen == scale)
            sub_inner = None if inner is None else inner[idx]
            try:
                vals, _ = pool_regions(pyramid.level(int(scale)), outer[idx], sub_inner, (gh, gw))
            except EmptyRegionError as exc:
                cand = int(idx[exc.region])
                raise EmptyRegionError(
                    f"region {spec.label} of candidate {cand} {boxes[cand].tolist()} "
                    f"projects to no cells at scale {int(scale)}", region=spec
                ) from exc
            out[idx, lo:hi] = vals.reshape(len(idx), -1)
    return out, layout


def build_descriptor(
    pyramid: ScalePyramid,
    candidate: BoundingBox,
    specs: Sequence[RegionSpec],
    grid=DEFAULT_GRID,
    target_side: float = DEFAULT_TARGET_SIDE,
) -> RegionDescriptor:
    vecs, layout = build_descriptors(pyramid, candidate.as_array(), specs, grid, target_side)
    return RegionDescriptor(vecs[0], layout)
