"""Scoring against ground-truth masks: point P/R, mask P/R, object counts and parameter sweeps."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.ndimage import binary_dilation

from .scan_io import Label, Raster
from .validation import CameraFrame, disk, project_points


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class FrameEval:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0

    def __add__(self, other: "FrameEval") -> "FrameEval":
        return FrameEval(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def row(self, frame: int) -> list:
        return [frame, self.tp, self.fp, self.fn, self.precision, self.recall]


ZERO = FrameEval(0, 0, 0)


def _in_frame(points, frame: CameraFrame):
    uv, _, status = project_points(points, frame)
    ok = status == 0
    return ok, np.rint(uv[:, 0]).astype(np.int64), np.rint(uv[:, 1]).astype(np.int64)


def _binary(mask: Raster | np.ndarray) -> np.ndarray:
    a = mask.samples if isinstance(mask, Raster) else np.asarray(mask)
    if a.ndim == 3:
        a = a.max(axis=2)
    return a > 0


def _check_size(mask: np.ndarray, frame: CameraFrame):
    w, h = frame.calib.image_size
    if mask.shape != (h, w):
        raise EvaluationError(f"mask is {mask.shape[1]}x{mask.shape[0]}, calibration expects {w}x{h}")


def labels_to_mask(labels, points, frame: CameraFrame, dilation: int = 4) -> Raster:
    """Project the Moving points and dilate them by a disk of ``dilation`` pixels."""
    labels = np.asarray(labels)
    w, h = frame.calib.image_size
    out = np.zeros((h, w), bool)
    moving = labels == Label.MOVING
    if moving.any():
        ok, u, v = _in_frame(np.asarray(points)[moving], frame)
        out[v[ok], u[ok]] = True
        if dilation > 0:
            out = binary_dilation(out, structure=disk(dilation))
    return Raster(out[:, :, None].astype(np.float64))


def prf_frame(labels, points, frame: CameraFrame, gt_mask) -> FrameEval:
    """Point-level counts against a mask. Only Static and Moving points take part."""
    gt = _binary(gt_mask)
    _check_size(gt, frame)
    labels = np.asarray(labels)
    ok, u, v = _in_frame(points, frame)
    inside = np.zeros(len(labels), bool)
    inside[ok] = gt[v[ok], u[ok]]
    moving = ok & (labels == Label.MOVING)
    static = ok & (labels == Label.STATIC)
    return FrameEval(int(np.sum(moving & inside)), int(np.sum(moving & ~inside)), int(np.sum(static & inside)))


def prf_labels(pred, gt_moving, classified=None) -> FrameEval:
    """Point-level counts against per-point ground truth (synthetic scenes)."""
    pred = np.asarray(pred) == Label.MOVING
    gt_moving = np.asarray(gt_moving).astype(bool)
    cl = np.ones(len(pred), bool) if classified is None else np.asarray(classified, bool)
    return FrameEval(int(np.sum(pred & gt_moving & cl)), int(np.sum(pred & ~gt_moving & cl)),
                     int(np.sum(~pred & gt_moving & cl)))


def mask_prf(pred_mask, gt_mask) -> FrameEval:
    """Pixel-level counts between a predicted and a ground-truth mask."""
    p = _binary(pred_mask)
    g = _binary(gt_mask)
    if p.shape != g.shape:
        raise EvaluationError(f"mask sizes differ: {p.shape} vs {g.shape}")
    return FrameEval(int(np.sum(p & g)), int(np.sum(p & ~g)), int(np.sum(~p & g)))


def points_in_mask(points, frame: CameraFrame, mask) -> np.ndarray:
    m = _binary(mask)
    _check_size(m, frame)
    ok, u, v = _in_frame(points, frame)
    out = np.zeros(len(ok), bool)
    out[ok] = m[v[ok], u[ok]]
    return out


@dataclass(frozen=True)
class ObjectCount:
    detected: bool
    partial: bool
    visible_frames: int
    covered_frames: int


def object_counts(labels_per_frame, object_points, min_coverage: float = 0.5,
                  min_frames: float = 0.5) -> dict:
    """D / PD per object.

    ``object_points[obj]`` holds one boolean array per frame marking the object's
    points. An object is visible in a frame when it has at least one Static or
    Moving point there. It is Detected when in at least ``min_frames`` of its
    visible frames at least ``min_coverage`` of those points are Moving, and
    Partially Detected when it is not Detected but some of its points are Moving.
    """
    out = {}
    for obj, per_frame in object_points.items():
        visible = covered = hits = 0
        for labels, members in zip(labels_per_frame, per_frame):
            labels = np.asarray(labels)
            members = np.asarray(members, bool)
            cl = members & ((labels == Label.STATIC) | (labels == Label.MOVING))
            n = int(cl.sum())
            if n == 0:
                continue
            m = int(np.sum(cl & (labels == Label.MOVING)))
            visible += 1
            hits += m
            covered += m >= min_coverage * n
        detected = visible > 0 and covered >= min_frames * visible
        out[obj] = ObjectCount(detected, not detected and hits > 0, visible, covered)
    return out


# --- ROC sweep -----------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    sigma_r_range: tuple = (0.1, 0.45)
    theta_range: tuple = (0.0035, 0.0088)
    steps: int = 3

    def __post_init__(self):
        for name in ("sigma_r_range", "theta_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name}: need lo < hi, got {lo}, {hi}")
        if self.steps < 2:
            raise ValueError("steps must be >= 2")

    def grid(self):
        """Cells in row-major order (sigma_r outer)."""
        sr = np.linspace(*self.sigma_r_range, self.steps)
        th = np.linspace(*self.theta_range, self.steps)
        return [(float(a), float(b)) for a in sr for b in th]


def score_run(results, seq, gt_masks, frames=None, dilation: int = 4) -> FrameEval:
    """Pixel counts of the dilated Moving masks against ``gt_masks`` summed over frames."""
    from .pipeline import frame_camera

    total = ZERO
    for r in results:
        if frames is not None and r.index not in frames:
            continue
        n = seq.position(r.index)
        cam = frame_camera(seq, n)
        pts = cam.pose.apply(seq.scans[n].points)
        total = total + mask_prf(labels_to_mask(r.labels, pts, cam, dilation), gt_masks[n])
    return total


def roc_sweep(seq, gt_masks, config, spec: SweepSpec = SweepSpec(), frames=None, dilation: int = 4):
    """One pipeline run per grid cell; returns rows ``(sigma_r, theta, precision, recall)``."""
    from .pipeline import run_sequence

    rows = []
    for sigma_r, theta in spec.grid():
        occ = replace(config.occupancy, sigma_r=sigma_r, theta_scale=theta)
        results = run_sequence(seq, replace(config, occupancy=occ))
        ev = score_run(results, seq, gt_masks, frames, dilation)
        rows.append((sigma_r, theta, ev.precision, ev.recall))
    return rows
