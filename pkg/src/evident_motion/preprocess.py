"""Scan registration and filtering: pose application, far-point crop, duplicate suppression, ICP."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .scan_io import Pose, ScanRecord


class DegenerateRegistrationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PreprocessParams:
    crop_tau: float = 30.0
    dedup_window: int = 10
    dedup_radius: float = 0.1
    icp_enabled: bool = False
    icp_max_iter: int = 20
    icp_corr_dist: float = 1.0

    def __post_init__(self):
        if not self.crop_tau > 0:
            raise ValueError("crop_tau must be positive")
        if self.dedup_window < 0:
            raise ValueError("dedup_window must be >= 0")
        if not self.dedup_radius > 0:
            raise ValueError("dedup_radius must be positive")


def apply_pose(scan: ScanRecord, pose: Pose) -> ScanRecord:
    return ScanRecord(pose.apply(scan.points), scan.intensity, scan.frame_index,
                      pose.apply(scan.sensor_origin))


def crop_far(scan: ScanRecord, params: PreprocessParams = PreprocessParams()):
    """Keep points within ``crop_tau`` of the sensor along every axis (boundary inclusive)."""
    d = np.abs(scan.points - scan.sensor_origin)
    kept = np.flatnonzero((d <= params.crop_tau).all(axis=1))
    return scan.subset(kept), kept


class DedupBuffer:
    """The last W retained clouds, each with its own KD-tree."""

    def __init__(self, window: int = 10, radius: float = 0.1):
        self.window = window
        self.radius = radius
        self._trees: list[cKDTree] = []

    def filter(self, points: np.ndarray) -> np.ndarray:
        """Boolean mask of points with no retained neighbour within ``radius``."""
        keep = np.ones(len(points), dtype=bool)
        for tree in self._trees:
            if not keep.any():
                break
            idx = np.flatnonzero(keep)
            d, _ = tree.query(points[idx], k=1, distance_upper_bound=self.radius)
            keep[idx[d <= self.radius]] = False
        return keep

    def push(self, points: np.ndarray) -> None:
        if self.window == 0:
            return
        if len(points):
            self._trees.append(cKDTree(points))
        else:
            self._trees.append(cKDTree(np.empty((0, 3))))
        del self._trees[:-self.window]

    def __len__(self):
        return len(self._trees)


def dedup_window(scan: ScanRecord, recent: Sequence[ScanRecord], params: PreprocessParams = PreprocessParams()):
    buf = DedupBuffer(params.dedup_window, params.dedup_radius)
    tail = list(recent)[-params.dedup_window:] if params.dedup_window else []
    for r in tail:
        buf.push(r.points)
    kept = np.flatnonzero(buf.filter(scan.points))
    return scan.subset(kept), kept


def best_rigid_transform(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rotation and translation mapping ``src`` onto ``dst`` (Kabsch)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return Pose(R, cd - R @ cs)


def icp_refine(source: ScanRecord, target: ScanRecord, init: Pose = None,
               params: PreprocessParams = PreprocessParams()) -> Pose:
    """Point-to-point ICP; the returned pose maps ``source`` points onto ``target``."""
    if len(source) == 0 or len(target) == 0:
        raise DegenerateRegistrationError("ICP needs non-empty scans")
    pose = init or Pose.identity()
    tree = cKDTree(target.points)
    for _ in range(params.icp_max_iter):
        moved = pose.apply(source.points)
        d, idx = tree.query(moved, k=1, distance_upper_bound=params.icp_corr_dist)
        ok = np.isfinite(d)
        if ok.sum() < 3:
            raise DegenerateRegistrationError(f"only {int(ok.sum())} correspondences")
        step = best_rigid_transform(moved[ok], target.points[idx[ok]])
        pose = step @ pose
        change = np.abs(step.rotation - np.eye(3)).max() + np.abs(step.translation).max()
        if change < 1e-6:
            break
    return pose
