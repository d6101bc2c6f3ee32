"""Rigid multi-scale ROI grid over a feature map, and max-pooling over it.

Scale s in 1..S uses square regions of side round(2*min(w,h)/(s+1)).
Along each axis the placement count is the smallest one whose uniformly
spaced regions (first at 0, last flush with the far edge) overlap their
neighbour by at least 40% of the side.  Real-valued offsets are rounded
half-up to cells.  On a 4:3 map this yields s*(s+1) regions per scale:
2, 6, 12, 20, 30 for s = 1..5.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .tensorio import FeatureMap


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, order=True)
class Region:
    """Half-open pixel box [x0, x1) x [y0, y1) tagged with its scale."""

    scale: int
    y0: int
    x0: int
    y1: int
    x1: int

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ContractError(f"empty region {self}")
        # squares up to one cell of rounding slack
        if abs((self.x1 - self.x0) - (self.y1 - self.y0)) > 1:
            raise ContractError(f"region {self} is not square")


@dataclass(frozen=True)
class RegionSet:
    regions: tuple[Region, ...]
    max_scale: int
    width: int
    height: int

    def __len__(self):
        return len(self.regions)


def _axis_offsets(axis_len: int, side: int) -> list[int]:
    if side >= axis_len:
        return [_round_half_up((axis_len - side) / 2.0)]
    # overlap >= 0.4*side  <=>  3*side*(n-1) >= 5*(axis_len-side), exact in ints
    span = axis_len - side
    n = 1 + -(-5 * span // (3 * side))
    step = span / (n - 1)
    return [_round_half_up(i * step) for i in range(n)]


def build_grid(width: int, height: int, scales: int) -> RegionSet:
    """All regions for a width x height map, ordered by (scale, y0, x0)."""
    if width < 1 or height < 1:
        raise ContractError(f"grid needs positive dims, got {width}x{height}")
    if scales < 1:
        raise ContractError(f"grid needs scales >= 1, got {scales}")
    regions = []
    short = min(width, height)
    for s in range(1, scales + 1):
        side = max(1, _round_half_up(2.0 * short / (s + 1)))
        ys = _axis_offsets(height, side)
        xs = _axis_offsets(width, side)
        side_y = min(side, height)
        side_x = min(side, width)
        for y0 in ys:
            for x0 in xs:
                regions.append(Region(scale=s, y0=y0, x0=x0,
                                      y1=y0 + side_y, x1=x0 + side_x))
    # rounding can duplicate offsets on tiny maps; keep (scale, y0, x0) order
    regions.sort()
    return RegionSet(regions=tuple(regions), max_scale=scales,
                     width=width, height=height)


def scale_counts(grid: RegionSet) -> list[int]:
    counts = [0] * grid.max_scale
    for r in grid.regions:
        counts[r.scale - 1] += 1
    return counts


def pool_regions(fm: FeatureMap, grid: RegionSet) -> np.ndarray:
    """Channelwise max over each region; row i is region i's vector.

    Output shape (len(grid), depth).  A region covering a single cell
    returns that cell's activations unchanged.
    """
    if (fm.width, fm.height) != (grid.width, grid.height):
        raise ContractError(
            f"grid built for {grid.width}x{grid.height}, map is "
            f"{fm.width}x{fm.height}"
        )
    out = np.empty((len(grid.regions), fm.depth), dtype=np.float32)
    for i, r in enumerate(grid.regions):
        if r.x1 > fm.width or r.y1 > fm.height or r.x0 < 0 or r.y0 < 0:
            raise ContractError(f"region {r} out of bounds for {fm.width}x{fm.height}")
        block = fm.data[r.y0:r.y1, r.x0:r.x1]
        out[i] = block.max(axis=(0, 1))
    return out
