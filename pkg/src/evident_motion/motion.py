"""Moving-point classification of the centre scan of a 2K+1 scan window.

Each other scan in the window contributes the fused belief of its beams that
pass within a small cone of the point; those beliefs are discretized with a
range-dependent mass and fused across scans. Points are grouped in octree
leaves and only a seeded subset of each populous leaf is tested.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .evidential import (
    VACUOUS,
    Belief,
    ConvTables,
    DiscretizeParams,
    OccupancyParams,
    build_smoothing_tables,
    compare,
    depth_weight_l,
    discretize,
    fuse_all,
    smoothed_beam_belief,
)
from .scan_io import ScanRecord

log = logging.getLogger(__name__)

MODES = ("discretized", "pairwise")


@dataclass(frozen=True)
class WindowParams:
    k_half: int = 10
    octree_resolution: float = 0.3
    leaf_sample_fraction: float = 1.0 / 6.0
    leaf_majority: float = 0.5
    tau_np: int = 6
    neighbor_angle_mult: float = 3.0
    neighbor_cap: int = 32
    seed: int = 0
    mode: str = "discretized"
    exhaustive: bool = False

    def __post_init__(self):
        if self.k_half < 1:
            raise ValueError("k_half must be >= 1")
        if not 0 < self.leaf_sample_fraction <= 1:
            raise ValueError("leaf_sample_fraction must be in (0, 1]")
        if not 0 < self.leaf_majority <= 1:
            raise ValueError("leaf_majority must be in (0, 1]")
        if self.tau_np < 1:
            raise ValueError("tau_np must be >= 1")
        if self.neighbor_cap < 1 or not self.neighbor_angle_mult > 0:
            raise ValueError("neighbor_cap and neighbor_angle_mult must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.octree_resolution > 0:
            raise ValueError("octree_resolution must be positive")


# --- beam index --------------------------------------------------------------

def estimate_angular_resolution(directions: np.ndarray, max_queries: int = 4096) -> float:
    """Median angle between a beam and its nearest neighbouring beam."""
    n = len(directions)
    if n < 2:
        return float("nan")
    tree = cKDTree(directions)
    step = max(1, n // max_queries)
    d, _ = tree.query(directions[::step], k=2)
    chord = d[:, 1]
    chord = chord[chord > 0]
    if not len(chord):
        return float("nan")
    return float(np.median(2.0 * np.arcsin(np.minimum(1.0, chord / 2.0))))


class ScanIndex:
    """Beams of one scan (world frame) binned by elevation/azimuth of their direction."""

    def __init__(self, scan: ScanRecord, bin_width: float | None = None, angle_mult: float = 3.0):
        self.scan = scan
        self.origin = np.array(scan.sensor_origin, dtype=np.float64)
        rel = scan.points - self.origin
        rq = np.sqrt(rel[:, 0] * rel[:, 0] + rel[:, 1] * rel[:, 1] + rel[:, 2] * rel[:, 2])
        self.beam_ids = np.flatnonzero(rq > 0)
        rq = rq[self.beam_ids]
        self.endpoints = scan.points[self.beam_ids]
        self.ranges = rq
        self.dirs = np.ascontiguousarray(rel[self.beam_ids] / rq[:, None])
        self.b_norm = float(rq.max()) if len(rq) else 0.0
        self.angular_resolution = estimate_angular_resolution(self.dirs)
        if bin_width is None:
            lam = self.angular_resolution if np.isfinite(self.angular_resolution) else 0.01
            bin_width = max(angle_mult * lam, 1e-4)
        self.bin_width = float(bin_width)
        el = np.arcsin(np.clip(self.dirs[:, 2], -1.0, 1.0))
        az = np.arctan2(self.dirs[:, 1], self.dirs[:, 0])
        self.el_lo = float(el.min()) if len(el) else 0.0
        span = (float(el.max()) - self.el_lo) if len(el) else 0.0
        self.n_el = int(span // self.bin_width) + 1
        self.n_az = max(1, int(2.0 * math.pi / self.bin_width))
        waz = 2.0 * math.pi / self.n_az
        eb = np.clip(((el - self.el_lo) // self.bin_width).astype(np.int64), 0, self.n_el - 1)
        ab = np.clip(((az + math.pi) // waz).astype(np.int64), 0, self.n_az - 1)
        bins = eb * self.n_az + ab
        self.order = np.argsort(bins, kind="stable").astype(np.int64)
        counts = np.bincount(bins, minlength=self.n_el * self.n_az)
        self.binoff = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def __len__(self):
        return len(self.ranges)


class _Packed(NamedTuple):
    origins: np.ndarray
    dirs: np.ndarray
    ranges: np.ndarray
    order: np.ndarray
    binoff: np.ndarray
    pt_base: np.ndarray
    bin_base: np.ndarray
    el_lo: np.ndarray
    n_el: np.ndarray
    n_az: np.ndarray
    bw: np.ndarray
    b_norm: np.ndarray


def _pack(indices: Sequence[ScanIndex]) -> _Packed:
    s = len(indices)
    if s == 0:
        z = np.zeros(1, np.int64)
        return _Packed(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0), np.zeros(0, np.int64), z,
                       z, z, np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64),
                       np.zeros(0), np.zeros(0))
    pt_base = np.concatenate([[0], np.cumsum([len(x) for x in indices])]).astype(np.int64)
    bin_base = np.concatenate([[0], np.cumsum([len(x.binoff) for x in indices])]).astype(np.int64)
    return _Packed(
        np.array([x.origin for x in indices]),
        np.ascontiguousarray(np.concatenate([x.dirs for x in indices])),
        np.concatenate([x.ranges for x in indices]),
        np.concatenate([x.order for x in indices]),
        np.concatenate([x.binoff for x in indices]),
        pt_base, bin_base,
        np.array([x.el_lo for x in indices]),
        np.array([x.n_el for x in indices], np.int64),
        np.array([x.n_az for x in indices], np.int64),
        np.array([x.bin_width for x in indices]),
        np.array([x.b_norm if x.b_norm > 0 else 1.0 for x in indices]),
    )


# --- window ------------------------------------------------------------------

@dataclass
class ScanWindow:
    """Points to classify plus the beam indices of the surrounding scans.

    ``center`` holds the candidate points of scan k (world frame). ``others``
    are the up-to-2K other scans; ``center_index`` indexes the beams of scan k
    itself and is only needed in pairwise mode.
    """

    center: ScanRecord
    others: list
    center_index: ScanIndex | None = None
    lambda_theta: float = float("nan")

    def __post_init__(self):
        if not np.isfinite(self.lambda_theta):
            lams = [x.angular_resolution for x in self.others]
            if self.center_index is not None:
                lams.append(self.center_index.angular_resolution)
            lams = [v for v in lams if np.isfinite(v)]
            self.lambda_theta = float(np.median(lams)) if lams else 0.0035


# --- octree ------------------------------------------------------------------

def _morton3(ix, iy, iz, depth: int) -> np.ndarray:
    code = np.zeros(len(ix), dtype=np.uint64)
    for b in range(depth):
        for k, a in enumerate((ix, iy, iz)):
            code |= ((a.astype(np.uint64) >> np.uint64(b)) & np.uint64(1)) << np.uint64(3 * b + k)
    return code


@dataclass
class Octree:
    """Octree over a point set, stored by its leaves in Morton order.

    A node at ``level`` (0 = root) is identified by ``leaf_code >> 3 * (depth - level)``.
    """

    origin: np.ndarray
    size: float
    depth: int
    leaf_keys: np.ndarray = field(repr=False)
    leaf_codes: np.ndarray = field(repr=False)
    leaf_start: np.ndarray = field(repr=False)
    point_order: np.ndarray = field(repr=False)

    @property
    def leaf_side(self) -> float:
        return self.size / (1 << self.depth)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_codes)

    def leaf_points(self, i: int) -> np.ndarray:
        return self.point_order[self.leaf_start[i]:self.leaf_start[i + 1]]

    def leaf_sizes(self) -> np.ndarray:
        return np.diff(self.leaf_start)

    def node_points(self, level: int, code: int) -> np.ndarray:
        shift = np.uint64(3 * (self.depth - level))
        parents = self.leaf_codes >> shift
        lo = np.searchsorted(parents, np.uint64(code), "left")
        hi = np.searchsorted(parents, np.uint64(code), "right")
        return self.point_order[self.leaf_start[lo]:self.leaf_start[hi]]


def build_octree(scan_or_points, resolution: float = 0.3) -> Octree:
    pts = scan_or_points.points if isinstance(scan_or_points, ScanRecord) else np.asarray(scan_or_points)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        e = np.zeros(0, np.int64)
        return Octree(np.zeros(3), resolution, 0, np.zeros((0, 3), np.int64), np.zeros(0, np.uint64),
                      np.zeros(1, np.int64), e)
    lo = pts.min(axis=0)
    extent = float((pts.max(axis=0) - lo).max())
    depth = max(0, int(math.ceil(math.log2(max(extent, resolution) / resolution))))
    while resolution * (1 << depth) <= extent:
        depth += 1
    size = resolution * (1 << depth)
    side = size / (1 << depth)
    keys = np.clip(np.floor((pts - lo) / side).astype(np.int64), 0, (1 << depth) - 1)
    codes = _morton3(keys[:, 0], keys[:, 1], keys[:, 2], depth)
    order = np.lexsort((np.arange(len(pts)), codes))
    sc = codes[order]
    starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
    leaf_start = np.r_[starts, len(order)].astype(np.int64)
    return Octree(lo, size, depth, keys[order[starts]], sc[starts], leaf_start, order.astype(np.int64))


# --- per-point reference operations ----------------------------------------

@dataclass(frozen=True)
class BeamGeometry:
    origin: np.ndarray
    endpoint: np.ndarray
    index: int
    angle: float


def candidate_beams(P, index: ScanIndex, cone: float, cap: int = 32) -> list[BeamGeometry]:
    """Beams of ``index`` within ``cone`` radians of the ray origin -> P, nearest first."""
    P = np.asarray(P, dtype=np.float64)
    d = P - index.origin
    dp = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    if dp == 0.0 or len(index) == 0:
        return []
    pk = _pack([index])
    ids, angs = _kernels.candidates_single(d[0] / dp, d[1] / dp, d[2] / dp, 0, pk.dirs, pk.order,
                                           pk.binoff, pk.pt_base, pk.bin_base, pk.el_lo, pk.n_el,
                                           pk.n_az, pk.bw, cone, cap)
    return [BeamGeometry(index.origin, index.endpoints[j], int(j), float(a)) for j, a in zip(ids, angs)]


def point_occupancy_in_scan(P, index: ScanIndex, cone: float, oparams: OccupancyParams,
                            tables: ConvTables, cap: int = 32) -> Belief:
    beams = candidate_beams(P, index, cone, cap)
    acc, conflicts = fuse_all(smoothed_beam_belief(P, b.origin, b.endpoint, oparams, tables) for b in beams)
    if conflicts:
        log.debug("total conflict in %d beam fusions", conflicts)
    return acc


def classify_point(P, window: ScanWindow, oparams: OccupancyParams = OccupancyParams(),
                   dparams: DiscretizeParams = DiscretizeParams(),
                   wparams: WindowParams = WindowParams(), tables: ConvTables | None = None) -> int:
    """Reference (uncompiled) classification of one point; returns 1 for Moving, 0 for Static."""
    tables = tables or build_smoothing_tables(oparams)
    cone = wparams.neighbor_angle_mult * window.lambda_theta
    cap = wparams.neighbor_cap
    if wparams.mode == "discretized":
        parts = []
        for idx in window.others:
            m = point_occupancy_in_scan(P, idx, cone, oparams, tables, cap)
            l = depth_weight_l(P, idx.b_norm if idx.b_norm > 0 else 1.0, idx.origin, dparams)
            parts.append(discretize(m, l))
        fused, _ = fuse_all(parts)
        return int(fused.e > fused.o and fused.e > fused.u)
    if window.center_index is None:
        raise ValueError("pairwise mode needs the centre scan index")
    mc = point_occupancy_in_scan(P, window.center_index, cone, oparams, tables, cap)
    votes = sum(compare(mc, point_occupancy_in_scan(P, idx, cone, oparams, tables, cap)).moving
                for idx in window.others)
    return int(2 * votes > len(window.others))


# --- leaf sampling -----------------------------------------------------------

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
        return z ^ (z >> np.uint64(31))


def leaf_priorities(seed: int, leaf_keys: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    """Pseudo-random priority per point, a pure function of (seed, leaf cell, rank in leaf)."""
    leaf_keys = np.asarray(leaf_keys, dtype=np.int64).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix64(np.full(len(leaf_keys), np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        for k in range(3):
            h = _splitmix64(h ^ leaf_keys[:, k])
        return _splitmix64(h ^ np.asarray(ranks, dtype=np.uint64))


def leaf_test_plan(tree: Octree, wparams: WindowParams):
    """Which points to test and how many each leaf needs.

    Returns ``(tested, leaf_of_point, n_tested, voting)``: a boolean mask over
    points, the leaf id of each point, tested count per leaf, and whether the
    leaf is decided by vote (``False`` means every point is labelled on its own).
    """
    n = len(tree.point_order)
    sizes = tree.leaf_sizes()
    leaf_of_sorted = np.repeat(np.arange(tree.n_leaves), sizes)
    leaf_of_point = np.empty(n, np.int64)
    leaf_of_point[tree.point_order] = leaf_of_sorted
    if wparams.exhaustive:
        return np.ones(n, bool), leaf_of_point, sizes.copy(), np.zeros(tree.n_leaves, bool)
    voting = sizes >= wparams.tau_np
    n_tested = np.where(voting, np.ceil(sizes * wparams.leaf_sample_fraction - 1e-12).astype(np.int64), sizes)
    n_tested = np.clip(n_tested, 1, sizes)
    ranks = np.arange(n) - np.repeat(tree.leaf_start[:-1], sizes)
    prio = leaf_priorities(wparams.seed, tree.leaf_keys[leaf_of_sorted], ranks)
    order = np.lexsort((ranks, prio, leaf_of_sorted))
    pos_in_leaf = np.arange(n) - np.repeat(tree.leaf_start[:-1], sizes)
    chosen_sorted = np.zeros(n, bool)
    chosen_sorted[order[pos_in_leaf < np.repeat(n_tested, sizes)]] = True
    tested = np.zeros(n, bool)
    tested[tree.point_order[chosen_sorted]] = True
    return tested, leaf_of_point, n_tested, voting


def resolve_leaves(point_labels: np.ndarray, tested: np.ndarray, leaf_of_point: np.ndarray,
                   n_tested: np.ndarray, voting: np.ndarray, majority: float) -> np.ndarray:
    """Spread sampled verdicts: voting leaves become all-Moving if enough tested points are Moving."""
    moving_votes = np.bincount(leaf_of_point[tested], weights=point_labels[tested].astype(np.float64),
                               minlength=len(n_tested))
    need = np.ceil(n_tested * majority - 1e-12)
    leaf_moving = moving_votes >= need
    out = np.where(voting[leaf_of_point], leaf_moving[leaf_of_point], point_labels.astype(bool))
    return out.astype(np.uint8)


def classify_leaf(leaf_points: np.ndarray, leaf_key, window: ScanWindow, oparams: OccupancyParams,
                  dparams: DiscretizeParams, wparams: WindowParams, tables: ConvTables | None = None):
    """Reference leaf classification over the window centre's points ``leaf_points`` (indices)."""
    leaf_points = np.asarray(leaf_points)
    n = len(leaf_points)
    pts = window.center.points[leaf_points]
    if n < wparams.tau_np or wparams.exhaustive:
        return np.array([classify_point(p, window, oparams, dparams, wparams, tables) for p in pts], np.uint8)
    m = min(n, max(1, math.ceil(n * wparams.leaf_sample_fraction - 1e-12)))
    ranks = np.arange(n)
    prio = leaf_priorities(wparams.seed, np.repeat(np.atleast_2d(leaf_key), n, axis=0), ranks)
    pick = np.lexsort((ranks, prio))[:m]
    votes = sum(classify_point(pts[i], window, oparams, dparams, wparams, tables) for i in pick)
    moving = votes >= math.ceil(m * wparams.leaf_majority - 1e-12)
    return np.full(n, int(moving), np.uint8)


# --- whole window --------------------------------------------------------------

@dataclass
class DetectionResult:
    labels: np.ndarray
    tested: np.ndarray
    fused: np.ndarray
    conflicts: int


def classify_many(points: np.ndarray, window: ScanWindow, oparams: OccupancyParams,
                  dparams: DiscretizeParams, wparams: WindowParams, tables: ConvTables):
    """Compiled per-point classification (no leaf voting)."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    scans = list(window.others)
    center_slot = -1
    mode = _kernels.MODE_DISCRETIZED
    if wparams.mode == "pairwise":
        if window.center_index is None:
            raise ValueError("pairwise mode needs the centre scan index")
        scans.append(window.center_index)
        center_slot = len(scans) - 1
        mode = _kernels.MODE_PAIRWISE
    pk = _pack(scans)
    cone = wparams.neighbor_angle_mult * window.lambda_theta
    if len(points) == 0:
        return np.zeros(0, np.uint8), np.zeros((0, 3)), np.zeros(0, np.int64)
    return _kernels.classify_points(
        points, len(window.others), center_slot, pk.origins, pk.dirs, pk.ranges, pk.order, pk.binoff,
        pk.pt_base, pk.bin_base, pk.el_lo, pk.n_el, pk.n_az, pk.bw, pk.b_norm, cone,
        wparams.neighbor_cap, oparams.theta_scale, tables.empty, tables.occupied, tables.step,
        tables.halfwidth, dparams.r_sup, dparams.r_inf, mode)


def detect_window(window: ScanWindow, oparams: OccupancyParams = OccupancyParams(),
                  dparams: DiscretizeParams = DiscretizeParams(), wparams: WindowParams = WindowParams(),
                  tables: ConvTables | None = None) -> DetectionResult:
    """Label every centre point 1 (Moving) or 0 (Static)."""
    tables = tables or build_smoothing_tables(oparams)
    pts = window.center.points
    n = len(pts)
    if n == 0 or not window.others:
        return DetectionResult(np.zeros(n, np.uint8), np.zeros(n, bool), np.zeros((n, 3)), 0)
    tree = build_octree(pts, wparams.octree_resolution)
    tested, leaf_of_point, n_tested, voting = leaf_test_plan(tree, wparams)
    idx = np.flatnonzero(tested)
    lab, fus, conf = classify_many(pts[idx], window, oparams, dparams, wparams, tables)
    point_labels = np.zeros(n, np.uint8)
    point_labels[idx] = lab
    fused = np.zeros((n, 3))
    fused[idx] = fus
    labels = resolve_leaves(point_labels, tested, leaf_of_point, n_tested, voting, wparams.leaf_majority)
    total_conf = int(conf.sum())
    if total_conf:
        log.debug("frame %d: %d total-conflict fusions", window.center.frame_index, total_conf)
    return DetectionResult(labels, tested, fused, total_conf)
