"""Point clouds, rigid poses, grid subsampling, range cropping and cloud files."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

PathLike = Union[str, "os.PathLike[str]"]


class CloudFormatError(ValueError):
    """Malformed cloud file; ``line`` is 1-based."""

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.fmod(math.pi - a, 2.0 * math.pi)
    if r < 0:
        r += 2.0 * math.pi
    return math.pi - r


def _rx(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a, order):
    c, s = math.cos(a), math.sin(a)
    if order == 1:
        return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    return np.array([[0.0, 0.0, 0.0], [0.0, -c, s], [0.0, -s, -c]])


def _dry(a, order):
    c, s = math.cos(a), math.sin(a)
    if order == 1:
        return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])
    return np.array([[-c, 0.0, -s], [0.0, 0.0, 0.0], [s, 0.0, -c]])


def _drz(a, order):
    c, s = math.cos(a), math.sin(a)
    if order == 1:
        return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
    return np.array([[-c, s, 0.0], [-s, -c, 0.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class Pose:
    """Rigid transform; rotation is Rz(yaw) @ Ry(pitch) @ Rx(roll)."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite pose component in {vals}")
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, normalize_angle(float(getattr(self, name))))
        for name in ("tx", "ty", "tz"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "Pose":
        return cls(*(float(x) for x in v))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        r = m[:3, :3]
        pitch = math.asin(max(-1.0, min(1.0, -r[2, 0])))
        if abs(r[2, 0]) < 1.0 - 1e-12:
            roll = math.atan2(r[2, 1], r[2, 2])
            yaw = math.atan2(r[1, 0], r[0, 0])
        else:  # gimbal lock, put everything into yaw
            roll = 0.0
            yaw = math.atan2(-r[0, 1], r[1, 1])
        return cls(m[0, 3], m[1, 3], m[2, 3], roll, pitch, yaw)

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.roll, self.pitch, self.yaw])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    def rotation(self) -> np.ndarray:
        return _rz(self.yaw) @ _ry(self.pitch) @ _rx(self.roll)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.translation
        return m

    def rotation_derivatives(self):
        """First and second derivatives of the rotation w.r.t. (roll, pitch, yaw).

        Returns ``d`` of shape (3, 3, 3) and ``dd`` of shape (3, 3, 3, 3) with
        ``d[k] = dR/da_k`` and ``dd[k, l] = d2R/(da_k da_l)``.
        """
        fr = [_rx(self.roll), _drx(self.roll, 1), _drx(self.roll, 2)]
        fp = [_ry(self.pitch), _dry(self.pitch, 1), _dry(self.pitch, 2)]
        fy = [_rz(self.yaw), _drz(self.yaw, 1), _drz(self.yaw, 2)]
        d = np.empty((3, 3, 3))
        dd = np.empty((3, 3, 3, 3))
        for k in range(3):
            ok = [0, 0, 0]
            ok[k] = 1
            d[k] = fy[ok[2]] @ fp[ok[1]] @ fr[ok[0]]
            for l in range(3):
                o = [0, 0, 0]
                o[k] += 1
                o[l] += 1
                dd[k, l] = fy[o[2]] @ fp[o[1]] @ fr[o[0]]
        return d, dd

    def compose(self, other: "Pose") -> "Pose":
        """``self * other``: apply ``other`` first, then ``self``."""
        return Pose.from_matrix(self.matrix() @ other.matrix())

    def inverse(self) -> "Pose":
        r = self.rotation()
        m = np.eye(4)
        m[:3, :3] = r.T
        m[:3, 3] = -r.T @ self.translation
        return Pose.from_matrix(m)

    def transform(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation().T + self.translation


IDENTITY = Pose()


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        arr = arr.reshape(0, 3)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError(f"points must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Immutable (n, 3) array of points in meters with a frame label."""

    points: np.ndarray
    frame_id: str = "map"

    def __post_init__(self):
        arr = _as_points(self.points)
        if arr is self.points:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "points", arr)

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PointCloud):
            return NotImplemented
        return self.frame_id == other.frame_id and np.array_equal(self.points, other.points)

    __hash__ = None  # type: ignore[assignment]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return PointCloud(points, self.frame_id)


def voxel_keys(points: np.ndarray, leaf: float) -> np.ndarray:
    """Integer grid index floor(p / leaf) per axis, world origin as grid origin."""
    return np.floor(points / leaf).astype(np.int64)


def voxel_filter(cloud: PointCloud, leaf: float) -> PointCloud:
    """One centroid per occupied cell of a regular grid, ordered by cell index."""
    if not leaf > 0:
        raise ValueError(f"leaf must be positive, got {leaf}")
    pts = cloud.points
    if len(pts) == 0:
        return cloud.with_points(pts)
    keys = voxel_keys(pts, leaf)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, pts)
    return cloud.with_points(sums / counts[:, None])


def crop_range(cloud: PointCloud, center, range_m: float) -> PointCloud:
    """Points within Euclidean distance ``range_m`` of ``center`` (inclusive), order kept."""
    if not range_m > 0:
        raise ValueError(f"range must be positive, got {range_m}")
    c = np.asarray(center, dtype=float).reshape(3)
    dist = np.sqrt(np.sum((cloud.points - c) ** 2, axis=1))
    return cloud.with_points(cloud.points[dist <= range_m])


def apply_pose(cloud: PointCloud, pose: Pose) -> PointCloud:
    return cloud.with_points(pose.transform(cloud.points))


def write_cloud(path: PathLike, cloud: PointCloud) -> None:
    """ASCII cloud: one ``x y z`` per line, 9 significant digits."""
    with open(path, "w") as fh:
        fh.write(f"# ndtrange cloud v1 frame={cloud.frame_id} n={len(cloud)}\n")
        for x, y, z in cloud.points:
            fh.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_cloud(path: PathLike, frame_id: str | None = None) -> PointCloud:
    pts = []
    frame = frame_id
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if frame is None and "frame=" in line:
                    frame = line.split("frame=", 1)[1].split()[0]
                continue
            toks = line.split()
            if len(toks) != 3:
                raise CloudFormatError(path, lineno, f"expected 3 values, got {len(toks)}")
            try:
                vals = [float(t) for t in toks]
            except ValueError:
                raise CloudFormatError(path, lineno, f"non-numeric token in {line!r}") from None
            if not all(math.isfinite(v) for v in vals):
                raise CloudFormatError(path, lineno, "non-finite coordinate")
            pts.append(vals)
    return PointCloud(np.array(pts, dtype=float).reshape(-1, 3), frame or "map")
