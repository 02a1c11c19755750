"""Streaming detection over a scan sequence.

Per frame: crop in the sensor frame, classify ground on the cropped cloud,
move to the world frame, suppress points already present in the last W
retained clouds, and index the non-ground beams. Frame k is classified once
frame k+K has arrived (or at flush), then optionally validated with images.
"""
from __future__ import annotations

import logging
import os
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np

from . import scan_io
from .evidential import DiscretizeParams, OccupancyParams, build_smoothing_tables
from .ground_filter import remove_ground
from .motion import ScanIndex, ScanWindow, WindowParams, detect_window
from .preprocess import DedupBuffer, PreprocessParams, apply_pose, crop_far, icp_refine
from .scan_io import CameraCalib, Label, Pose, ScanRecord
from .validation import CameraFrame, ValidationParams, validate_candidates

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GroundParams:
    enabled: bool = True
    cell_size: float = 0.4
    slope_s: float = 0.09
    max_gap: int = 8


@dataclass(frozen=True)
class PipelineConfig:
    preprocess: PreprocessParams = PreprocessParams()
    ground: GroundParams = GroundParams()
    occupancy: OccupancyParams = OccupancyParams()
    discretize: DiscretizeParams = DiscretizeParams()
    window: WindowParams = WindowParams()
    validation: ValidationParams | None = None

    def with_(self, **sections) -> "PipelineConfig":
        return replace(self, **sections)


@dataclass
class FrameState:
    index: int
    pose: Pose
    labels: np.ndarray  # over the raw scan
    world: ScanRecord  # cropped scan in the world frame (ground included)
    nonground: np.ndarray  # indices into ``world``
    candidates: np.ndarray  # indices into the raw scan still to classify
    candidate_points: np.ndarray
    beams: ScanIndex
    camera: CameraFrame | None = None
    timing: dict = field(default_factory=dict)


@dataclass
class FrameResult:
    index: int
    labels: np.ndarray
    timing: dict
    validation: object = None


STAGES = ("preprocess", "ground", "index", "detect", "validate")


class Detector:
    """Push scans in order; completed frames come back with a K-frame delay."""

    def __init__(self, config: PipelineConfig = PipelineConfig(), calib: CameraCalib | None = None):
        self.config = config
        self.calib = calib
        self.tables = build_smoothing_tables(config.occupancy)
        self._frames: "OrderedDict[int, FrameState]" = OrderedDict()
        self._dedup = DedupBuffer(config.preprocess.dedup_window, config.preprocess.dedup_radius)
        self._next_emit = None
        self._last_world = None
        self._last_pose = None

    # -- ingestion ---------------------------------------------------------

    def _resolve_pose(self, cropped: ScanRecord, pose: Pose | None) -> Pose:
        pp = self.config.preprocess
        if pose is None and not pp.icp_enabled:
            raise ConfigError("no pose given and ICP is disabled")
        if not pp.icp_enabled:
            return pose
        init = pose or self._last_pose or Pose.identity()
        if self._last_world is None or len(cropped) < 3:
            return init
        return icp_refine(cropped, self._last_world, init, pp)

    def _prepare(self, scan: ScanRecord, pose: Pose | None, image=None) -> FrameState:
        cfg = self.config
        t0 = time.perf_counter()
        n = len(scan)
        labels = np.full(n, Label.STATIC, np.uint8)
        cropped, kept = crop_far(scan, cfg.preprocess)
        labels[np.setdiff1d(np.arange(n), kept)] = Label.DROPPED
        t1 = time.perf_counter()
        if cfg.ground.enabled:
            gmask = remove_ground(cropped, cfg.ground.cell_size, cfg.ground.slope_s, cfg.ground.max_gap)
        else:
            gmask = np.zeros(len(cropped), bool)
        labels[kept[gmask]] = Label.GROUND
        t2 = time.perf_counter()
        pose = self._resolve_pose(cropped, pose)
        world = apply_pose(cropped, pose)
        nonground = np.flatnonzero(~gmask)
        ng_points = world.points[nonground]
        fresh = self._dedup.filter(ng_points)
        labels[kept[nonground[~fresh]]] = Label.DROPPED
        self._dedup.push(ng_points[fresh])
        cand_local = nonground[fresh]
        t3 = time.perf_counter()
        beams = ScanIndex(world.subset(nonground), angle_mult=cfg.window.neighbor_angle_mult)
        t4 = time.perf_counter()
        camera = None
        if self.calib is not None and (image is not None or cfg.validation is not None):
            camera = CameraFrame(self.calib, pose, image)
        self._last_world, self._last_pose = world, pose
        timing = {"preprocess": (t1 - t0) + (t3 - t2), "ground": t2 - t1, "index": t4 - t3}
        return FrameState(scan.frame_index, pose, labels, world, nonground, kept[cand_local],
                          world.points[cand_local], beams, camera, timing)

    def push(self, scan: ScanRecord, pose: Pose | None = None, image=None) -> list[FrameResult]:
        if self.config.validation is not None and (self.calib is None or image is None):
            raise ConfigError(f"frame {scan.frame_index}: image validation needs calibration and an image")
        st = self._prepare(scan, pose, image)
        self._frames[st.index] = st
        if self._next_emit is None:
            self._next_emit = st.index
        out = []
        k = self.config.window.k_half
        while self._next_emit is not None and self._next_emit + k <= st.index:
            out.append(self._emit(self._next_emit))
        return out

    def flush(self) -> list[FrameResult]:
        out = []
        while self._next_emit is not None and self._next_emit in self._frames:
            out.append(self._emit(self._next_emit))
        return out

    # -- classification ----------------------------------------------------

    def window_for(self, k: int) -> ScanWindow:
        st = self._frames[k]
        K = self.config.window.k_half
        others = [self._frames[i].beams for i in range(k - K, k + K + 1) if i != k and i in self._frames]
        center = ScanRecord(st.candidate_points, np.zeros(len(st.candidate_points)), st.index,
                            st.world.sensor_origin)
        return ScanWindow(center, others, st.beams)

    def _emit(self, k: int) -> FrameResult:
        cfg = self.config
        st = self._frames[k]
        t0 = time.perf_counter()
        window = self.window_for(k)
        res = detect_window(window, cfg.occupancy, cfg.discretize, cfg.window, self.tables)
        labels = st.labels.copy()
        labels[st.candidates] = np.where(res.labels == 1, Label.MOVING, Label.STATIC)
        t1 = time.perf_counter()
        vstats = None
        if cfg.validation is not None:
            K = cfg.window.k_half
            frames = {i: self._frames[i].camera for i in range(k - K, k + K + 1)
                      if i in self._frames and self._frames[i].camera is not None}
            cand_labels = labels[st.candidates]
            new, vstats = validate_candidates(cand_labels, st.candidate_points, k, frames, cfg.validation,
                                              depth_source=lambda i: self._frames[i].world.points[self._frames[i].nonground])
            labels[st.candidates] = new
        t2 = time.perf_counter()
        timing = dict(st.timing, detect=t1 - t0, validate=t2 - t1)
        self._next_emit = k + 1
        lo = k + 1 - cfg.window.k_half
        for old in [i for i in self._frames if i < lo]:
            del self._frames[old]
        return FrameResult(k, labels, timing, vstats)


# --- sequences on disk -----------------------------------------------------------

@dataclass
class SequenceInput:
    scans: list
    poses: list | None
    calib: CameraCalib | None = None
    images: list | None = None

    def position(self, frame_index: int) -> int:
        for n, sc in enumerate(self.scans):
            if sc.frame_index == frame_index:
                return n
        raise KeyError(f"frame {frame_index} not in sequence")


def frame_camera(seq: SequenceInput, n: int) -> CameraFrame:
    """Camera of the n-th scan, without image."""
    if seq.calib is None or seq.poses is None:
        raise ConfigError("camera projection needs calib.txt and poses")
    return CameraFrame(seq.calib, seq.poses[n])


def load_sequence(root, need_images: bool = False) -> SequenceInput:
    vel = os.path.join(root, "velodyne")
    if not os.path.isdir(vel):
        raise ConfigError(f"{root}: missing velodyne/ directory")
    frames = scan_io.list_frames(vel, ".bin")
    scans = [scan_io.read_scan(os.path.join(vel, scan_io.frame_name(i, ".bin")), i) for i in frames]
    poses = None
    pose_path = os.path.join(root, "poses.txt")
    if os.path.exists(pose_path):
        all_poses = scan_io.read_pose_file(pose_path)
        if len(all_poses) <= max(frames, default=-1):
            raise ConfigError(f"{pose_path}: {len(all_poses)} poses for frame index {max(frames)}")
        poses = [all_poses[i] for i in frames]
    calib = None
    calib_path = os.path.join(root, "calib.txt")
    if os.path.exists(calib_path):
        calib = scan_io.read_camera_calib(calib_path)
    images = None
    img_dir = os.path.join(root, "image")
    if os.path.isdir(img_dir):
        images = []
        for i in frames:
            p = os.path.join(img_dir, scan_io.frame_name(i, ".ppm"))
            images.append(scan_io.read_raster(p) if os.path.exists(p) else None)
    if need_images and (calib is None or images is None or any(im is None for im in images)):
        raise ConfigError(f"{root}: image validation needs calib.txt and image/<frame>.ppm for every frame")
    return SequenceInput(scans, poses, calib, images)


def run_sequence(seq: SequenceInput, config: PipelineConfig = PipelineConfig(), on_result=None) -> list[FrameResult]:
    det = Detector(config, seq.calib)
    results = []
    for n, scan in enumerate(seq.scans):
        pose = seq.poses[n] if seq.poses is not None else None
        image = seq.images[n] if seq.images is not None else None
        for r in det.push(scan, pose, image):
            results.append(r)
            if on_result:
                on_result(r)
    for r in det.flush():
        results.append(r)
        if on_result:
            on_result(r)
    return results


def from_synthetic(synth_seq) -> SequenceInput:
    return SequenceInput(list(synth_seq.scans), list(synth_seq.poses), synth_seq.spec.camera,
                         list(synth_seq.images) if synth_seq.spec.camera is not None else None)
