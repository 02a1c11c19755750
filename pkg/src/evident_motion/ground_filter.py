"""Ground removal on a 2D tile grid with ring-wise propagation of the ground height.

Tiles are visited in Chebyshev rings around the sensor tile. A tile is ground iff
its height span is below ``slope_s`` and its top lies less than ``slope_s`` per
tile crossed above the ground height propagated from its visited inner-ring
neighbours.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scan_io import Label, ScanRecord


@dataclass
class CellStats:
    h_max: float
    h_min: float
    point_indices: np.ndarray
    propagated: float = float("nan")
    ground_height: float = float("nan")
    is_ground: bool = False


@dataclass
class GroundGrid:
    cell_size: float = 0.4
    slope_s: float = 0.09
    max_gap: int = 8
    cells: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.cell_size > 0 and self.slope_s > 0):
            raise ValueError("cell_size and slope_s must be positive")
        if self.max_gap < 0:
            raise ValueError("max_gap must be >= 0")

    def ground_cells(self):
        return [k for k, c in self.cells.items() if c.is_ground]


def build_height_grid(scan: ScanRecord, cell_size: float = 0.4, slope_s: float = 0.09,
                      max_gap: int = 8) -> GroundGrid:
    """Bin points into tiles ``(floor(x / cell), floor(y / cell))`` relative to the sensor."""
    grid = GroundGrid(cell_size, slope_s, max_gap)
    if len(scan) == 0:
        return grid
    rel = scan.points - scan.sensor_origin
    ij = np.floor(rel[:, :2] / cell_size).astype(np.int64)
    z = rel[:, 2]
    order = np.lexsort((ij[:, 1], ij[:, 0]))
    sij = ij[order]
    starts = np.flatnonzero(np.r_[True, (np.diff(sij, axis=0) != 0).any(axis=1)])
    ends = np.r_[starts[1:], len(order)]
    zs = z[order]
    hmax = np.maximum.reduceat(zs, starts)
    hmin = np.minimum.reduceat(zs, starts)
    for s, e, hi, lo in zip(starts, ends, hmax, hmin):
        key = (int(sij[s, 0]), int(sij[s, 1]))
        grid.cells[key] = CellStats(float(hi), float(lo), np.sort(order[s:e]))
    return grid


def find_seed(grid: GroundGrid):
    """Origin tile if populated, else the populated tile nearest to the origin."""
    if (0, 0) in grid.cells:
        return (0, 0)
    return min(grid.cells, key=lambda k: ((k[0] + 0.5) ** 2 + (k[1] + 0.5) ** 2, k))


_NEIGHBOURS = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]
_FAR = np.iinfo(np.int64).max // 2


def _shift(arr, di, dj, fill):
    """``out[a, b] = arr[a + di, b + dj]`` where defined, ``fill`` elsewhere."""
    out = np.full(arr.shape, fill, dtype=arr.dtype)
    ni, nj = arr.shape
    a0, a1 = max(0, -di), ni - max(0, di)
    b0, b1 = max(0, -dj), nj - max(0, dj)
    out[a0:a1, b0:b1] = arr[a0 + di:a1 + di, b0 + dj:b1 + dj]
    return out


def classify_cells(grid: GroundGrid) -> GroundGrid:
    """Propagate ground height ring by ring around the origin tile and label every tile in place.

    The tiles right under the sensor are usually empty. Empty tiles reachable from
    the origin without crossing a populated tile form a blind region; a populated
    tile whose only visited inner neighbours lie in that region seeds itself with
    its own lowest point. Elsewhere empty tiles pass the ground height outward for
    at most ``max_gap`` consecutive tiles, and the step bound is scaled by the
    number of tiles crossed.
    """
    if not grid.cells:
        return grid
    keys = np.array(list(grid.cells), dtype=np.int64)
    i0, j0 = np.minimum(keys.min(axis=0), 0)
    ni, nj = np.maximum(keys.max(axis=0), 0) - (i0, j0) + 1
    populated = np.zeros((ni, nj), bool)
    H = np.full((ni, nj), np.nan)
    h = np.full((ni, nj), np.nan)
    for (i, j), c in grid.cells.items():
        populated[i - i0, j - j0] = True
        H[i - i0, j - j0] = c.h_max
        h[i - i0, j - j0] = c.h_min

    oi, oj = -i0, -j0
    ii, jj = np.meshgrid(np.arange(ni), np.arange(nj), indexing="ij")
    ring = np.maximum(np.abs(ii - oi), np.abs(jj - oj))

    propagated = np.full((ni, nj), np.nan)
    ground_h = np.full((ni, nj), np.nan)
    gap = np.full((ni, nj), _FAR, dtype=np.int64)
    known = np.zeros((ni, nj), bool)
    blind = np.zeros((ni, nj), bool)
    is_ground = np.zeros((ni, nj), bool)
    s = grid.slope_s

    # step allowance grows with the number of tiles crossed so the slope bound holds over gaps
    allow = np.full((ni, nj), s)

    def settle(mask):
        g = mask & populated & (H - h < s) & (H < propagated + allow)
        is_ground[g] = True
        ground_h[mask] = np.where(g[mask], H[mask], propagated[mask])

    if populated[oi, oj]:
        propagated[oi, oj] = h[oi, oj]
        gap[oi, oj] = 0
        known[oi, oj] = True
        settle(ring == 0)
    else:
        blind[oi, oj] = True

    for r in range(1, int(ring.max()) + 1):
        cur = ring == r
        inner_known = known & (ring == r - 1)
        inner_blind = blind & (ring == r - 1)
        best = np.full((ni, nj), -np.inf)
        min_gap = np.full((ni, nj), _FAR, dtype=np.int64)
        from_blind = np.zeros((ni, nj), bool)
        for di, dj in _NEIGHBOURS:
            src = _shift(inner_known, di, dj, False)
            best = np.where(src, np.maximum(best, _shift(ground_h, di, dj, -np.inf)), best)
            min_gap = np.where(src, np.minimum(min_gap, _shift(gap, di, dj, _FAR)), min_gap)
            from_blind |= _shift(inner_blind, di, dj, False)
        new_gap = np.where(populated, 0, min_gap + 1)
        reached = cur & np.isfinite(best) & (new_gap <= grid.max_gap)
        seeds = cur & ~reached & from_blind & populated
        blind |= cur & ~reached & from_blind & ~populated
        propagated[reached] = best[reached]
        allow[reached] = s * (min_gap[reached] + 1)
        gap[reached] = new_gap[reached]
        propagated[seeds] = h[seeds]
        gap[seeds] = 0
        reached |= seeds
        known |= reached
        settle(reached)

    for (i, j), c in grid.cells.items():
        a, b = i - i0, j - j0
        c.propagated = float(propagated[a, b])
        c.is_ground = bool(is_ground[a, b])
        c.ground_height = float(ground_h[a, b])
    return grid


def ground_mask(scan: ScanRecord, grid: GroundGrid) -> np.ndarray:
    mask = np.zeros(len(scan), dtype=bool)
    for c in grid.cells.values():
        if c.is_ground:
            mask[c.point_indices] = True
    return mask


def strip_ground(scan: ScanRecord, grid: GroundGrid, labels=None):
    """Return the non-ground working cloud and the label array with ground points marked."""
    labels = np.zeros(len(scan), np.uint8) if labels is None else np.array(labels, dtype=np.uint8)
    mask = ground_mask(scan, grid)
    labels[mask] = Label.GROUND
    return scan.subset(np.flatnonzero(~mask)), labels


def remove_ground(scan: ScanRecord, cell_size: float = 0.4, slope_s: float = 0.09, max_gap: int = 8):
    """Build, classify and return the boolean ground mask for a sensor-frame scan."""
    grid = classify_cells(build_height_grid(scan, cell_size, slope_s, max_gap))
    return ground_mask(scan, grid)
