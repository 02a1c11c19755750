"""Image-based rejection of false-positive moving points.

A candidate is projected into the centre camera and into every other camera of
the window. Textured colour patches are compared with per-channel normalized
cross-correlation; flat patches (or flat channels) fall back to comparing
lidar depth-map patches with the mean squared difference. A candidate whose
patches look the same in every usable frame is demoted to static.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numba import njit
from scipy.ndimage import grey_erosion, map_coordinates

from .scan_io import CameraCalib, Label, Pose, Raster


class NoPatchError(ValueError):
    pass


class EmptyDepthmapError(ValueError):
    pass


@dataclass(frozen=True)
class ValidationParams:
    patch_height_h: float = 0.15
    ncc_tau: float = 0.1
    uniform_std: float = 0.02
    dilation_radius: int = 4
    ncc_search_radius: int = 2
    ssd_tau: float = 0.01

    def __post_init__(self):
        for name in ("patch_height_h", "ncc_tau", "uniform_std", "dilation_radius", "ssd_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.ncc_search_radius < 0:
            raise ValueError("ncc_search_radius must be >= 0")


@dataclass
class CameraFrame:
    """Camera image of one scan. ``pose`` is the lidar pose (world_from_lidar) at that scan."""

    calib: CameraCalib
    pose: Pose
    image: Raster | None = None
    depth: Raster | None = None
    d_max: float = 0.0
    _cam: Pose | None = field(default=None, repr=False)

    @property
    def world_to_camera(self) -> Pose:
        if self._cam is None:
            self._cam = self.calib.lidar_to_camera @ self.pose.inverse()
        return self._cam

    @property
    def center(self) -> np.ndarray:
        """Camera position in the world frame."""
        return self.world_to_camera.inverse().translation


BEHIND = "behind"
OUTSIDE = "outside"


class Projection(NamedTuple):
    pixel: tuple
    distance: float


def project_points(points, frame: CameraFrame):
    """Vectorized projection: returns ``(uv, distance, status)``; status 0 ok, 1 behind, 2 outside."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    pc = frame.world_to_camera.apply(pts)
    P = frame.calib.projection
    hom = pc @ P[:, :3].T + P[:, 3]
    z = pc[:, 2]
    status = np.zeros(len(pts), np.int8)
    behind = (z <= 0) | (hom[:, 2] <= 0)
    status[behind] = 1
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = hom[:, :2] / hom[:, 2:3]
    w, h = frame.calib.image_size
    ui = np.rint(uv[:, 0])
    vi = np.rint(uv[:, 1])
    outside = ~behind & ~((ui >= 0) & (ui < w) & (vi >= 0) & (vi < h))
    status[outside] = 2
    dist = np.sqrt((pc * pc).sum(axis=1))
    return uv, dist, status


def project_to_camera(P, frame: CameraFrame):
    uv, dist, status = project_points(P, frame)
    if status[0] == 1:
        return BEHIND
    if status[0] == 2:
        return OUTSIDE
    return Projection((float(uv[0, 0]), float(uv[0, 1])), float(dist[0]))


# --- patches -----------------------------------------------------------------

def patch_side(h: float, d: float, f_xy: float) -> int:
    """Side in pixels of the patch covering ``h`` meters at distance ``d``: floored, odd, at least 3."""
    if not d > 0:
        raise ValueError("distance must be positive")
    side = int(math.floor(h / d * f_xy))
    if side % 2 == 0:
        side += 1
    return max(3, side)


def extract_patch(raster: Raster, pixel, d: float, params: ValidationParams, f_xy: float) -> np.ndarray:
    """Square patch centred on the (sub-pixel) ``pixel``, sampled bilinearly with edge clamping.

    The ``side`` samples are spread over the unrounded footprint ``h / d * f_xy`` so
    that patches of one surface seen from different distances cover the same
    extent. Returns a (side, side, channels) array; when the footprint is exactly
    ``side`` and the pixel is integral this is a plain crop.
    """
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= round(u) < raster.width and 0 <= round(v) < raster.height):
        raise NoPatchError(f"pixel {pixel} is outside the raster")
    side = patch_side(params.patch_height_h, d, f_xy)
    raw = params.patch_height_h / d * f_xy
    step = raw / side if raw >= side - 2 else 1.0
    off = (np.arange(side, dtype=np.float64) - side // 2) * step
    rr, cc = np.meshgrid(v + off, u + off, indexing="ij")
    if step == 1.0 and u == int(u) and v == int(v):
        rows = np.clip(rr[:, 0].astype(np.int64), 0, raster.height - 1)
        cols = np.clip(cc[0].astype(np.int64), 0, raster.width - 1)
        return raster.samples[np.ix_(rows, cols)]
    return np.stack([map_coordinates(raster.samples[:, :, c], [rr, cc], order=1, mode="nearest")
                     for c in range(raster.channels)], axis=2)


def resize_patch(patch: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of a square patch to ``side`` x ``side`` (corners aligned)."""
    n = patch.shape[0]
    if n == side:
        return patch
    g = np.linspace(0.0, n - 1.0, side)
    rr, cc = np.meshgrid(g, g, indexing="ij")
    return np.stack([map_coordinates(patch[:, :, c], [rr, cc], order=1, mode="nearest")
                     for c in range(patch.shape[2])], axis=2)


def match_sizes(a: np.ndarray, b: np.ndarray):
    side = min(a.shape[0], b.shape[0])
    return resize_patch(a, side), resize_patch(b, side)


def is_uniform(patch, params: ValidationParams = ValidationParams()) -> bool:
    p = patch.samples if isinstance(patch, Raster) else np.asarray(patch)
    if p.ndim == 3:
        p = p.mean(axis=2)
    return bool(p.std() <= params.uniform_std)


@njit(cache=True)
def _ncc_channel(a, b, radius):
    """Max NCC over integer shifts of b against a; NaN if a or b is flat."""
    n = a.shape[0]
    r = min(radius, n // 2)
    best = -np.inf
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            r0 = max(0, dv)
            r1 = min(n, n + dv)
            c0 = max(0, du)
            c1 = min(n, n + du)
            cnt = (r1 - r0) * (c1 - c0)
            sa = 0.0
            sb = 0.0
            for i in range(r0, r1):
                for j in range(c0, c1):
                    sa += a[i, j]
                    sb += b[i - dv, j - du]
            ma = sa / cnt
            mb = sb / cnt
            sab = 0.0
            saa = 0.0
            sbb = 0.0
            for i in range(r0, r1):
                for j in range(c0, c1):
                    x = a[i, j] - ma
                    y = b[i - dv, j - du] - mb
                    sab += x * y
                    saa += x * x
                    sbb += y * y
            if saa <= 1e-18 or sbb <= 1e-18:
                continue
            v = sab / math.sqrt(saa * sbb)
            if v > best:
                best = v
    return min(1.0, max(-1.0, best))


def _flat(ch: np.ndarray) -> bool:
    return float(ch.max() - ch.min()) <= 1e-12


def ncc_dissimilarity(a, b, params: ValidationParams = ValidationParams()) -> np.ndarray:
    """Per-channel ``1 - max NCC``; NaN marks an undefined channel (flat in either patch)."""
    a = a.samples if isinstance(a, Raster) else np.asarray(a, dtype=np.float64)
    b = b.samples if isinstance(b, Raster) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("patches must have the same shape")
    out = np.empty(a.shape[2])
    for c in range(a.shape[2]):
        ac = np.ascontiguousarray(a[:, :, c])
        bc = np.ascontiguousarray(b[:, :, c])
        if _flat(ac) or _flat(bc):
            out[c] = np.nan
        else:
            out[c] = 1.0 - _ncc_channel(ac, bc, params.ncc_search_radius)
    return out


def ssd_dissimilarity(a, b) -> float:
    a = a.samples if isinstance(a, Raster) else np.asarray(a, dtype=np.float64)
    b = b.samples if isinstance(b, Raster) else np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("patches must have the same shape")
    return float(np.mean((a - b) ** 2))


# --- depth maps ----------------------------------------------------------------

def disk(radius: int) -> np.ndarray:
    r = int(radius)
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    return x * x + y * y <= r * r


def build_depthmap(points, frame: CameraFrame, params: ValidationParams = ValidationParams()):
    """Sparse nearest-distance map normalized by its maximum and closed with a min-disk dilation.

    Returns ``(Raster, d_max)``; unobserved pixels are 1.
    """
    uv, dist, status = project_points(points, frame)
    ok = status == 0
    if not ok.any():
        raise EmptyDepthmapError("no point projects inside the image")
    w, h = frame.calib.image_size
    u = np.rint(uv[ok, 0]).astype(np.int64)
    v = np.rint(uv[ok, 1]).astype(np.int64)
    d = dist[ok]
    d_max = float(d.max())
    img = np.full(h * w, np.inf)
    np.minimum.at(img, v * w + u, d)
    img = img.reshape(h, w)
    img = np.where(np.isfinite(img), img / d_max, 1.0)
    img = grey_erosion(img, footprint=disk(params.dilation_radius), mode="nearest")
    return Raster(np.clip(img, 0.0, 1.0)), d_max


def correct_depthmap(depth: Raster, d_max_l: float, t_k, t_l) -> Raster:
    """Shift every sample of map l by the camera displacement relative to its depth range."""
    shift = float(np.linalg.norm(np.asarray(t_k, dtype=np.float64) - np.asarray(t_l, dtype=np.float64))) / d_max_l
    return Raster(np.clip(depth.samples + shift, 0.0, 1.0))


# --- candidate validation --------------------------------------------------------

@dataclass
class ValidationStats:
    candidates: int = 0
    demoted: int = 0
    demoted_ncc: int = 0
    demoted_depth: int = 0
    no_evidence: int = 0
    route: np.ndarray | None = None  # per point: 0 untouched, 1 kept, 2 demoted by NCC, 3 demoted with depth


def compare_views(P, frame_k: CameraFrame, frame_l: CameraFrame, params: ValidationParams,
                  depth_k=None, depth_l=None):
    """Compare P's appearance in two cameras.

    Returns ``None`` when P is not visible in both, otherwise ``(similar, route)``
    with route ``"ncc"`` or ``"depth"``.
    """
    pk = project_to_camera(P, frame_k)
    pl = project_to_camera(P, frame_l)
    if not isinstance(pk, Projection) or not isinstance(pl, Projection):
        return None
    return _compare_projected(pk, pl, frame_k, frame_l, params, depth_k, depth_l)


def _compare_projected(pk, pl, frame_k, frame_l, params, depth_k, depth_l):
    fk, fl = frame_k.calib.f_xy, frame_l.calib.f_xy
    if frame_k.image is not None and frame_l.image is not None:
        a = extract_patch(frame_k.image, pk.pixel, pk.distance, params, fk)
        b = extract_patch(frame_l.image, pl.pixel, pl.distance, params, fl)
        a, b = match_sizes(a, b)
        if not (is_uniform(a, params) or is_uniform(b, params)):
            e = ncc_dissimilarity(a, b, params)
            if not np.isnan(e).any():
                return bool((e < params.ncc_tau).all()), "ncc"
    if depth_k is None or depth_l is None:
        return None
    a = extract_patch(depth_k, pk.pixel, pk.distance, params, fk)
    b = extract_patch(depth_l, pl.pixel, pl.distance, params, fl)
    a, b = match_sizes(a, b)
    return ssd_dissimilarity(a, b) < params.ssd_tau, "depth"


def validate_candidates(labels, points, center: int, frames: dict, params: ValidationParams = ValidationParams(),
                        depth_source=None):
    """Demote Moving points whose appearance is consistent across every usable frame.

    ``points`` are the world coordinates matching ``labels``; ``frames`` maps frame
    index to CameraFrame and must contain ``center``. ``depth_source(i)`` returns
    the world points used to build frame i's depth map (built lazily, cached on
    the frame). Returns ``(labels, ValidationStats)``.
    """
    labels = np.array(labels, dtype=np.uint8)
    points = np.asarray(points, dtype=np.float64)
    stats = ValidationStats(route=np.zeros(len(labels), np.int8))
    cand = np.flatnonzero(labels == Label.MOVING)
    stats.candidates = len(cand)
    if center not in frames or not len(cand):
        stats.no_evidence = len(cand)
        return labels, stats
    fk = frames[center]
    others = sorted((i for i in frames if i != center), key=lambda i: (-abs(i - center), i))

    def depth(i):
        f = frames[i]
        if f.depth is None and depth_source is not None:
            try:
                f.depth, f.d_max = build_depthmap(depth_source(i), f, params)
            except EmptyDepthmapError:
                return None
        return f.depth

    corrected = {}

    def corrected_depth(i):
        if i not in corrected:
            d = depth(i)
            corrected[i] = None if d is None else correct_depthmap(d, frames[i].d_max, fk.center, frames[i].center)
        return corrected[i]

    uv_k, dist_k, st_k = project_points(points[cand], fk)
    proj_l = {i: project_points(points[cand], frames[i]) for i in others}
    for n, pi in enumerate(cand):
        if st_k[n] != 0:
            stats.no_evidence += 1
            stats.route[pi] = 1
            continue
        pk = Projection((uv_k[n, 0], uv_k[n, 1]), dist_k[n])
        usable = 0
        used_depth = False
        similar_all = True
        for i in others:
            uv, dist, st = proj_l[i]
            if st[n] != 0:
                continue
            pl = Projection((uv[n, 0], uv[n, 1]), dist[n])
            res = _compare_projected(pk, pl, fk, frames[i], params, depth(center), corrected_depth(i))
            if res is None:
                continue
            usable += 1
            similar, route = res
            used_depth |= route == "depth"
            if not similar:
                similar_all = False
                break
        if usable == 0:
            stats.no_evidence += 1
            stats.route[pi] = 1
        elif similar_all:
            labels[pi] = Label.STATIC
            stats.demoted += 1
            if used_depth:
                stats.demoted_depth += 1
                stats.route[pi] = 3
            else:
                stats.demoted_ncc += 1
                stats.route[pi] = 2
        else:
            stats.route[pi] = 1
    return labels, stats
