"""Readers and writers for scans, poses, calibration, rasters, labels and metric tables.

Scans use the KITTI velodyne layout (little-endian float32 x, y, z, intensity),
rasters are binary 8-bit PGM/PPM, label files hold one byte per point.
"""
from __future__ import annotations

import csv
import enum
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

_SCAN_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """A file does not match the expected layout."""


class MalformedScanError(FormatError):
    pass


class PoseParseError(FormatError):
    pass


class InvalidPoseError(ValueError):
    pass


class Label(enum.IntEnum):
    STATIC = 0
    MOVING = 1
    GROUND = 2
    DROPPED = 3


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ScanRecord:
    """One lidar revolution.

    ``points`` is an (N, 3) float64 array in meters, ``intensity`` an (N,) array
    in [0, 1]. ``sensor_origin`` is the beam origin expressed in the same frame
    as the points.
    """

    points: np.ndarray
    intensity: np.ndarray
    frame_index: int = 0
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
        origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if inten.shape[0] != pts.shape[0]:
            raise ValueError("intensity length does not match point count")
        if not (np.isfinite(pts).all() and np.isfinite(inten).all() and np.isfinite(origin).all()):
            raise MalformedScanError("scan contains non-finite values")
        if self.frame_index < 0:
            raise ValueError("frame_index must be >= 0")
        object.__setattr__(self, "points", _frozen(pts))
        object.__setattr__(self, "intensity", _frozen(inten))
        object.__setattr__(self, "sensor_origin", _frozen(origin))

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def from_xyz(cls, xyz, frame_index: int = 0, sensor_origin=None, intensity=None) -> "ScanRecord":
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        if intensity is None:
            intensity = np.zeros(len(xyz))
        return cls(xyz, intensity, frame_index, np.zeros(3) if sensor_origin is None else sensor_origin)

    def subset(self, indices) -> "ScanRecord":
        indices = np.asarray(indices, dtype=np.int64)
        return ScanRecord(self.points[indices], self.intensity[indices], self.frame_index, self.sensor_origin)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R @ x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if abs(np.linalg.det(R) - 1.0) >= 1e-6 or np.abs(R.T @ R - np.eye(3)).max() >= 1e-6:
            raise InvalidPoseError("rotation is not orthonormal")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m, tol: float = 1e-3) -> "Pose":
        """Build from a 3x4 or 4x4 matrix, re-orthonormalizing R if it is within ``tol``."""
        m = np.asarray(m, dtype=np.float64)
        R = orthonormalize(m[:3, :3], tol)
        return cls(R, m[:3, 3])

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = np.cos(yaw), np.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation


def orthonormalize(R, tol: float = 1e-3) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if not np.isfinite(R).all():
        raise InvalidPoseError("rotation contains non-finite values")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or np.linalg.det(R) <= 0:
        raise InvalidPoseError("rotation is farther than %g from orthonormal" % tol)
    U, _, Vt = np.linalg.svd(R)
    return U @ Vt


@dataclass(frozen=True)
class CameraCalib:
    """Pinhole camera. ``projection`` maps homogeneous camera-frame points to pixels."""

    projection: np.ndarray
    image_size: tuple[int, int]
    lidar_to_camera: Pose
    f_xy: float = 0.0

    def __post_init__(self):
        P = np.asarray(self.projection, dtype=np.float64).reshape(3, 4)
        object.__setattr__(self, "projection", _frozen(P))
        w, h = (int(v) for v in self.image_size)
        object.__setattr__(self, "image_size", (w, h))
        if not self.f_xy:
            object.__setattr__(self, "f_xy", float(0.5 * (P[0, 0] + P[1, 1])))
        if self.f_xy <= 0 or w <= 0 or h <= 0:
            raise ValueError("focal length and image size must be positive")


@dataclass(frozen=True)
class Raster:
    """Image with samples in [0, 1], stored as a (height, width, channels) array."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim == 2:
            s = s[:, :, None]
        if s.ndim != 3 or s.shape[2] not in (1, 3):
            raise ValueError("raster must have 1 or 3 channels")
        if s.size and (s.min() < 0.0 or s.max() > 1.0):
            raise ValueError("raster samples must lie in [0, 1]")
        object.__setattr__(self, "samples", _frozen(s))

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def channels(self) -> int:
        return self.samples.shape[2]

    def gray(self) -> np.ndarray:
        return self.samples.mean(axis=2)


# --- scans -----------------------------------------------------------------

def read_scan(path, frame_index: int = 0) -> ScanRecord:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 16:
        raise MalformedScanError(f"{path}: size {raw.size} is not a multiple of 16 bytes")
    data = raw.view(_SCAN_DTYPE).reshape(-1, 4).astype(np.float64)
    if not np.isfinite(data).all():
        raise MalformedScanError(f"{path}: non-finite values")
    return ScanRecord(data[:, :3], data[:, 3], frame_index)


def write_scan(path, scan: ScanRecord) -> None:
    data = np.empty((len(scan), 4), dtype=_SCAN_DTYPE)
    data[:, :3] = scan.points
    data[:, 3] = scan.intensity
    data.tofile(path)


# --- poses -----------------------------------------------------------------

def parse_pose_line(line: str, tol: float = 1e-3) -> Pose:
    tokens = line.split()
    if len(tokens) != 12:
        raise PoseParseError(f"expected 12 numbers, got {len(tokens)}")
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise PoseParseError(str(exc)) from None
    return Pose.from_matrix(np.array(values).reshape(3, 4), tol)


def read_pose_file(path) -> list[Pose]:
    poses = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                poses.append(parse_pose_line(line))
            except PoseParseError as exc:
                raise PoseParseError(f"{path}:{lineno}: {exc}") from None
    return poses


def format_pose(pose: Pose) -> str:
    return " ".join(repr(float(v)) for v in pose.matrix()[:3].ravel())


def write_pose_file(path, poses: Iterable[Pose]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for p in poses:
            fh.write(format_pose(p) + "\n")


# --- calibration -----------------------------------------------------------

def read_camera_calib(path) -> CameraCalib:
    """Parse ``P: <12>``, ``Tr: <12>`` and ``size: <w> <h>`` lines."""
    entries = {}
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise FormatError(f"{path}: expected 'key: values', got {line.strip()!r}")
            try:
                entries[key.strip()] = [float(v) for v in value.split()]
            except ValueError:
                raise FormatError(f"{path}: bad number in {key.strip()!r}") from None
    for key, n in (("P", 12), ("Tr", 12), ("size", 2)):
        if key not in entries:
            raise FormatError(f"{path}: missing key {key!r}")
        if len(entries[key]) != n:
            raise FormatError(f"{path}: {key!r} needs {n} values")
    P = np.array(entries["P"]).reshape(3, 4)
    Tr = Pose.from_matrix(np.array(entries["Tr"]).reshape(3, 4))
    w, h = entries["size"]
    return CameraCalib(P, (int(w), int(h)), Tr)


def write_camera_calib(path, calib: CameraCalib) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("P: " + " ".join(repr(float(v)) for v in calib.projection.ravel()) + "\n")
        fh.write("Tr: " + format_pose(calib.lidar_to_camera) + "\n")
        fh.write("size: %d %d\n" % calib.image_size)


# --- rasters ---------------------------------------------------------------

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_pnm(data: bytes) -> Raster:
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unknown magic number {magic!r}")
    channels = 1 if magic == b"P5" else 3
    pos = 2
    header = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise FormatError("truncated header")
        try:
            header.append(int(m.group(1)))
        except ValueError:
            raise FormatError("bad header field") from None
        pos = m.end()
    width, height, maxval = header
    if maxval != 255:
        raise FormatError("only 8-bit rasters are supported")
    if width <= 0 or height <= 0:
        raise FormatError("raster size must be positive")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("truncated header")
    pos += 1
    n = width * height * channels
    payload = data[pos:]
    if len(payload) < n:
        raise FormatError(f"truncated payload: need {n} bytes, got {len(payload)}")
    if len(payload) > n:
        raise FormatError(f"payload has {len(payload) - n} trailing bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return Raster(arr / 255.0)


def encode_pnm(raster: Raster) -> bytes:
    magic = b"P5" if raster.channels == 1 else b"P6"
    q = np.rint(raster.samples * 255.0).astype(np.uint8)
    return magic + b"\n%d %d\n255\n" % (raster.width, raster.height) + q.tobytes()


def read_raster(path) -> Raster:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return decode_pnm(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_raster(path, raster: Raster) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(raster))


# --- labels ----------------------------------------------------------------

def read_label_file(path) -> np.ndarray:
    labels = np.fromfile(path, dtype=np.uint8)
    if labels.size and labels.max() > 3:
        raise FormatError(f"{path}: label value {int(labels.max())} > 3")
    return labels


def write_label_file(path, labels) -> None:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 3):
        raise FormatError("label values must be in {0, 1, 2, 3}")
    labels.astype(np.uint8).tofile(path)


# --- metrics ---------------------------------------------------------------

METRICS_HEADER = ("frame", "tp", "fp", "fn", "precision", "recall")


def write_metrics_csv(path, rows: Sequence) -> None:
    """Rows are mappings or sequences ordered as ``METRICS_HEADER``."""
    write_csv(path, METRICS_HEADER, rows)


def write_csv(path, header: Sequence[str], rows: Sequence) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            if isinstance(row, dict):
                row = [row[k] for k in header]
            w.writerow([_fmt(v) for v in row])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="ascii") as fh:
        return list(csv.DictReader(fh))


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def frame_name(index: int, ext: str) -> str:
    return f"{index:06d}{ext}"


def list_frames(directory, ext: str) -> list[int]:
    out = []
    for name in os.listdir(directory):
        stem, e = os.path.splitext(name)
        if e == ext and stem.isdigit():
            out.append(int(stem))
    return sorted(out)
