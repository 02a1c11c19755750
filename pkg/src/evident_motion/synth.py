"""Ray-cast synthetic lidar sequences with camera frames and ground truth.

Scenes are made of a ground surface (flat, sloped along x, or a step) and
axis-aligned boxes, each with a constant velocity in meters per frame. All
intersections are closed-form, so every emitted point can be checked against
the primitive it came from.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import scan_io
from .scan_io import CameraCalib, Pose, Raster, ScanRecord

SENSOR_HEIGHT = 1.73

# lidar frame (x fwd, y left, z up) -> camera frame (x right, y down, z fwd)
LIDAR_TO_CAMERA_R = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Ground:
    kind: str = "flat"  # flat | slope | step | none
    value: float = 0.0  # slope in percent, or step height in meters
    step_x: float = 10.0
    color: tuple = (0.45, 0.45, 0.45)

    def height(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "slope":
            return x * self.value / 100.0
        if self.kind == "step":
            return np.where(x >= self.step_x, self.value, 0.0)
        return np.zeros_like(x)


@dataclass(frozen=True)
class Box:
    center: tuple
    size: tuple
    color: tuple = (0.8, 0.2, 0.2)
    velocity: tuple = (0.0, 0.0, 0.0)
    textured: bool = False
    checker: float = 0.05

    @property
    def moving(self) -> bool:
        return any(v != 0 for v in self.velocity)

    def bounds(self, frame: int):
        c = np.asarray(self.center, dtype=np.float64) + frame * np.asarray(self.velocity, dtype=np.float64)
        h = 0.5 * np.asarray(self.size, dtype=np.float64)
        return c - h, c + h


@dataclass(frozen=True)
class Lidar:
    azimuth_res: float = np.deg2rad(0.2)
    elevations: tuple = tuple(np.deg2rad(np.linspace(-24.0, 4.0, 64)))
    max_range: float = 80.0

    def __post_init__(self):
        if not self.azimuth_res > 0:
            raise ValueError("azimuth_res must be positive")

    def directions(self) -> np.ndarray:
        n = int(round(2 * np.pi / self.azimuth_res))
        az = -np.pi + self.azimuth_res * np.arange(n)
        el = np.asarray(self.elevations, dtype=np.float64)
        A, E = np.meshgrid(az, el, indexing="xy")
        return np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)


def default_calib(width: int = 640, height: int = 192, focal: float = 500.0) -> CameraCalib:
    K = np.array([[focal, 0.0, width / 2.0, 0.0], [0.0, focal, height / 2.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return CameraCalib(K, (width, height), Pose(LIDAR_TO_CAMERA_R, np.zeros(3)))


@dataclass
class SceneSpec:
    ground: Ground = field(default_factory=Ground)
    boxes: list = field(default_factory=list)
    sensor_path: list = field(default_factory=list)  # world_from_lidar Pose per frame
    lidar: Lidar = field(default_factory=Lidar)
    camera: CameraCalib | None = None
    frames: int = 1
    noise_sigma: float = 0.02
    background: tuple = (0.55, 0.7, 0.9)
    supersample: int = 1  # camera rays per pixel side; colours are averaged


    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        if self.supersample < 1:
            raise ValueError("supersample must be >= 1")
        if self.sensor_path and len(self.sensor_path) < self.frames:
            raise ValueError("sensor_path shorter than frame count")

    def pose(self, frame: int) -> Pose:
        if self.sensor_path:
            return self.sensor_path[frame]
        return Pose.identity()


@dataclass
class SyntheticSequence:
    spec: SceneSpec
    scans: list  # ScanRecord in the sensor frame
    poses: list
    gt_labels: list  # uint8 per point, 1 = moving
    gt_objects: list  # int per point: box id, -1 for ground
    images: list  # Raster or None
    gt_masks: list  # Raster or None
    object_masks: dict  # box id -> list of Raster


# --- intersections -------------------------------------------------------------

def _ray_plane(o, d, n, offset):
    """Hit distance of rays ``o + t d`` with the plane ``n . x = offset`` (inf if none)."""
    den = d @ n
    num = offset - o @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / den
    t = np.where((np.abs(den) > 1e-12) & (t > 1e-9), t, np.inf)
    return t


def intersect_ground(o, d, ground: Ground):
    o = np.broadcast_to(o, d.shape)
    if ground.kind == "none":
        return np.full(len(d), np.inf)
    if ground.kind in ("flat", "slope"):
        g = ground.value / 100.0 if ground.kind == "slope" else 0.0
        return _ray_plane(o, d, np.array([-g, 0.0, 1.0]), 0.0)
    if ground.kind == "step":
        h = ground.value
        t1 = _ray_plane(o, d, np.array([0.0, 0.0, 1.0]), 0.0)
        x1 = o[:, 0] + t1 * d[:, 0]
        t1 = np.where(np.isfinite(t1) & (x1 < ground.step_x), t1, np.inf)
        t2 = _ray_plane(o, d, np.array([0.0, 0.0, 1.0]), h)
        x2 = o[:, 0] + t2 * d[:, 0]
        t2 = np.where(np.isfinite(t2) & (x2 >= ground.step_x), t2, np.inf)
        t3 = _ray_plane(o, d, np.array([1.0, 0.0, 0.0]), ground.step_x)
        z3 = o[:, 2] + t3 * d[:, 2]
        lo, hi = min(0.0, h), max(0.0, h)
        t3 = np.where(np.isfinite(t3) & (z3 >= lo) & (z3 <= hi), t3, np.inf)
        return np.minimum(np.minimum(t1, t2), t3)
    raise ValueError(f"unknown ground kind {ground.kind!r}")


def intersect_box(o, d, lo, hi):
    """Slab test; returns entry distance (exit distance if the origin is inside), inf on miss."""
    o = np.broadcast_to(o, d.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1)).max(axis=1)
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1)).min(axis=1)
    t = np.where(tmin > 1e-9, tmin, tmax)
    return np.where((tmax >= tmin) & (t > 1e-9), t, np.inf)


def cast(o, d, spec: SceneSpec, frame: int):
    """Nearest hit distance and primitive id (-1 ground, i >= 0 box i, -2 none) per ray."""
    t = intersect_ground(o, d, spec.ground)
    hit = np.where(np.isfinite(t), -1, -2)
    for i, box in enumerate(spec.boxes):
        lo, hi = box.bounds(frame)
        tb = intersect_box(o, d, lo, hi)
        closer = tb < t
        t = np.where(closer, tb, t)
        hit = np.where(closer, i, hit)
    return t, hit


def surface_distance(points, spec: SceneSpec, frame: int, ids) -> np.ndarray:
    """Distance of each point to the primitive it was sampled from."""
    points = np.asarray(points, dtype=np.float64)
    out = np.full(len(points), np.inf)
    g = ids == -1
    if g.any():
        p = points[g]
        if spec.ground.kind == "slope":
            s = spec.ground.value / 100.0
            out[g] = np.abs(p[:, 2] - s * p[:, 0]) / np.sqrt(1 + s * s)
        elif spec.ground.kind == "step":
            h = spec.ground.value
            dz = np.where(p[:, 0] >= spec.ground.step_x, np.abs(p[:, 2] - h), np.abs(p[:, 2]))
            lo, hi = min(0.0, h), max(0.0, h)
            riser = np.hypot(p[:, 0] - spec.ground.step_x, np.maximum(0, np.maximum(lo - p[:, 2], p[:, 2] - hi)))
            out[g] = np.minimum(dz, riser)
        else:
            out[g] = np.abs(p[:, 2])
    for i, box in enumerate(spec.boxes):
        m = ids == i
        if not m.any():
            continue
        lo, hi = box.bounds(frame)
        p = points[m]
        outside = np.maximum(np.maximum(lo - p, p - hi), 0.0)
        d_out = np.linalg.norm(outside, axis=1)
        inside = np.all((p >= lo) & (p <= hi), axis=1)
        d_in = np.minimum(p - lo, hi - p).min(axis=1)
        out[m] = np.where(inside, d_in, d_out)
    return out


# --- rendering -------------------------------------------------------------------

def _shade(spec: SceneSpec, hit, pts, frame):
    img = np.empty((len(hit), 3))
    img[:] = spec.background
    img[hit == -1] = spec.ground.color
    for i, box in enumerate(spec.boxes):
        m = hit == i
        if not m.any():
            continue
        col = np.asarray(box.color, dtype=np.float64)
        if box.textured:
            lo, _ = box.bounds(frame)
            q = np.floor((pts[m] - lo) / box.checker + 1e-6).astype(np.int64).sum(axis=1)
            f = np.where(q % 2 == 0, 1.0, 0.5)
            img[m] = col[None, :] * f[:, None]
        else:
            img[m] = col
    return img


def camera_pose(sensor_pose: Pose, calib: CameraCalib) -> Pose:
    """world_from_camera."""
    return sensor_pose @ calib.lidar_to_camera.inverse()


def _pixel_rays(spec: SceneSpec, cam: Pose, du: float, dv: float):
    calib = spec.camera
    w, h = calib.image_size
    u, v = np.meshgrid(np.arange(w, dtype=np.float64) + du, np.arange(h, dtype=np.float64) + dv)
    pix = np.stack([u.ravel(), v.ravel(), np.ones(u.size)], axis=1)
    pix = pix - calib.projection[:, 3][None, :]
    rays_c = np.linalg.solve(calib.projection[:, :3], pix.T).T
    rays_w = rays_c @ cam.rotation.T
    return rays_w / np.linalg.norm(rays_w, axis=1, keepdims=True)


def render(spec: SceneSpec, frame: int):
    """RGB image, moving-object mask, and per-box masks for one frame.

    Colours are averaged over ``supersample``^2 rays per pixel; masks come from
    the ray through the pixel centre.
    """
    w, h = spec.camera.image_size
    cam = camera_pose(spec.pose(frame), spec.camera)
    o = cam.translation
    n = spec.supersample
    offsets = (np.arange(n) + 0.5) / n - 0.5
    img = np.zeros((w * h, 3))
    for dv in offsets:
        for du in offsets:
            rays = _pixel_rays(spec, cam, du, dv)
            t, hit = cast(o, rays, spec, frame)
            pts = o + np.where(np.isfinite(t), t, 0.0)[:, None] * rays
            img += _shade(spec, hit, pts, frame)
    img = (img / (n * n)).reshape(h, w, 3)
    if n > 1:
        _, hit = cast(o, _pixel_rays(spec, cam, 0.0, 0.0), spec, frame)
    moving_ids = [i for i, b in enumerate(spec.boxes) if b.moving]
    mask = np.isin(hit, moving_ids).reshape(h, w).astype(np.float64)
    objects = {i: (hit == i).reshape(h, w).astype(np.float64) for i in moving_ids}
    return Raster(np.clip(img, 0.0, 1.0)), Raster(mask), {i: Raster(m) for i, m in objects.items()}


# --- sequence --------------------------------------------------------------------

def scan_frame(spec: SceneSpec, frame: int, seed: int = 0):
    """Sensor-frame scan plus per-point ground-truth labels and primitive ids."""
    pose = spec.pose(frame)
    d = spec.lidar.directions() @ pose.rotation.T
    o = pose.translation
    t, hit = cast(o, d, spec, frame)
    ok = (t <= spec.lidar.max_range) & (hit != -2)
    pts = o + t[ok, None] * d[ok]
    rng = np.random.default_rng([seed, frame])
    if spec.noise_sigma > 0:
        pts = pts + rng.normal(0.0, spec.noise_sigma, pts.shape)
    ids = hit[ok]
    moving = np.array([b.moving for b in spec.boxes] + [False], dtype=bool)
    gt = moving[np.where(ids >= 0, ids, len(spec.boxes))].astype(np.uint8)
    local = pose.inverse().apply(pts)
    inten = np.full(len(local), 0.5)
    return ScanRecord(local, inten, frame), gt, ids


def generate_sequence(spec: SceneSpec, seed: int = 0) -> SyntheticSequence:
    scans, poses, labels, objs, images, masks = [], [], [], [], [], []
    object_masks = {i: [] for i, b in enumerate(spec.boxes) if b.moving}
    for f in range(spec.frames):
        scan, gt, ids = scan_frame(spec, f, seed)
        scans.append(scan)
        poses.append(spec.pose(f))
        labels.append(gt)
        objs.append(ids)
        if spec.camera is not None:
            img, mask, om = render(spec, f)
            images.append(img)
            masks.append(mask)
            for i, m in om.items():
                object_masks[i].append(m)
        else:
            images.append(None)
            masks.append(None)
    return SyntheticSequence(spec, scans, poses, labels, objs, images, masks, object_masks)


def write_sequence(seq: SyntheticSequence, root) -> None:
    """Lay the sequence out as velodyne/, poses.txt, calib.txt, image/, gt_labels/, gt_masks/, gt_objects/."""
    for sub in ("velodyne", "gt_labels"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    scan_io.write_pose_file(os.path.join(root, "poses.txt"), seq.poses)
    for f, scan in enumerate(seq.scans):
        scan_io.write_scan(os.path.join(root, "velodyne", scan_io.frame_name(f, ".bin")), scan)
        scan_io.write_label_file(os.path.join(root, "gt_labels", scan_io.frame_name(f, ".label")), seq.gt_labels[f])
    if seq.spec.camera is None:
        return
    scan_io.write_camera_calib(os.path.join(root, "calib.txt"), seq.spec.camera)
    os.makedirs(os.path.join(root, "image"), exist_ok=True)
    os.makedirs(os.path.join(root, "gt_masks"), exist_ok=True)
    for f in range(len(seq.scans)):
        scan_io.write_raster(os.path.join(root, "image", scan_io.frame_name(f, ".ppm")), seq.images[f])
        scan_io.write_raster(os.path.join(root, "gt_masks", scan_io.frame_name(f, ".pgm")), seq.gt_masks[f])
    for i, frames in seq.object_masks.items():
        d = os.path.join(root, "gt_objects", f"{i:03d}")
        os.makedirs(d, exist_ok=True)
        for f, m in enumerate(frames):
            scan_io.write_raster(os.path.join(d, scan_io.frame_name(f, ".pgm")), m)


# --- preset scenes -----------------------------------------------------------------

def straight_path(frames: int, speed: float, ground: Ground = Ground(), start_x: float = 0.0) -> list:
    out = []
    for f in range(frames):
        x = start_x + f * speed
        out.append(Pose(np.eye(3), (x, 0.0, SENSOR_HEIGHT + float(ground.height(x)))))
    return out


def street_scene(frames: int = 30, moving: bool = True, ground: Ground = Ground("slope", 4.0),
                 textured: bool = False, sensor_speed: float = 0.2, box_speed: float = 1.0,
                 noise_sigma: float = 0.01, lidar: Lidar = Lidar(), camera: bool = True,
                 mover_y: float = 8.5, mover_size=(4.0, 2.0, 3.0)) -> SceneSpec:
    """A street between two building walls, parked boxes, and optionally one vehicle driving along x.

    The vehicle uses the lane next to the left wall: beams through it in other
    frames then end on the wall rather than on the (removed) ground.
    """
    g = ground.value / 100.0 if ground.kind == "slope" else 0.0

    def on_ground(x, y, sx, sy, sz, **kw):
        return Box((x, y, g * x + sz / 2.0), (sx, sy, sz), **kw)

    boxes = [
        Box((10.0, 13.0, 2.0), (80.0, 1.0, 12.0 + 4 * abs(g) * 40), color=(0.75, 0.7, 0.55), textured=textured),
        Box((10.0, -13.0, 2.0), (80.0, 1.0, 12.0 + 4 * abs(g) * 40), color=(0.6, 0.65, 0.7), textured=textured),
        on_ground(9.0, -5.0, 4.0, 1.8, 1.5, color=(0.2, 0.4, 0.8), textured=textured),
        on_ground(17.0, -6.0, 2.0, 2.0, 2.0, color=(0.3, 0.7, 0.3), textured=textured),
        on_ground(24.0, -9.5, 3.0, 2.0, 2.5, color=(0.7, 0.5, 0.2), textured=textured),
    ]
    if moving:
        vx = box_speed
        sx, sy, sz = mover_size
        boxes.append(on_ground(-4.0, mover_y, sx, sy, sz, color=(0.85, 0.15, 0.15),
                               velocity=(vx, 0.0, g * vx), textured=textured))
    return SceneSpec(ground, boxes, straight_path(frames, sensor_speed, ground), lidar,
                     default_calib() if camera else None, frames, noise_sigma)


def validation_scene(frames: int = 7, textured: bool = False, sensor_speed: float = 0.0,
                     checker: float = 0.05, noise_sigma: float = 0.01, lidar: Lidar = Lidar(),
                     image_size=(640, 400)) -> SceneSpec:
    """Camera-facing scene: a parked box about 6 m ahead and a box crossing the view at 1 m/frame.

    Both boxes are close enough for their surface texture to be resolved by the
    camera. The crossing box is centred in front of the sensor at the middle frame.
    """
    ground = Ground()
    mid = (frames - 1) // 2

    def on_ground(x, y, sx, sy, sz, **kw):
        return Box((x, y, sz / 2.0), (sx, sy, sz), textured=textured, checker=checker, **kw)

    boxes = [
        Box((20.0, 0.0, 4.0), (1.0, 40.0, 8.0), color=(0.7, 0.68, 0.6), textured=textured, checker=checker),
        on_ground(6.0, -1.6, 1.0, 1.4, 1.6, color=(0.2, 0.4, 0.8)),
        on_ground(9.0, 1.2 - mid * 1.0, 1.6, 1.8, 1.6, color=(0.85, 0.15, 0.15), velocity=(0.0, 1.0, 0.0)),
    ]
    return SceneSpec(ground, boxes, straight_path(frames, sensor_speed, ground), lidar,
                     default_calib(*image_size), frames, noise_sigma, supersample=3)
