"""Map factors of a local vicinity: the inputs of the error model.

A vicinity is the set of NDT cells whose mean lies within ``range`` of a query
point. Every factor here is a pure function of the map, the query point and
the range.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field, fields
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .cloud import PathLike, Pose
from .ndt import NdCell, NdtMap, _evaluate

FACTORS_CSV_VERSION = "ndtrange-factors v1"


class UndefinedFactorError(ValueError):
    """A factor has no value for this vicinity (for instance r_average with no cells)."""


class Dim(enum.Enum):
    D1 = 1
    D2 = 2
    D3 = 3


@dataclass(frozen=True)
class DimensionBehavior:
    a1d: float
    a2d: float
    a3d: float
    klass: Dim


@dataclass(frozen=True)
class DepthImageSpec:
    """Spherical depth image around the query point; angles in degrees."""

    azimuth_bins: int = 180
    elevation_bins: int = 20
    elevation_min: float = -10.0
    elevation_max: float = 30.0

    def validate(self) -> None:
        if self.azimuth_bins < 1 or self.elevation_bins < 1:
            raise ValueError("depth image needs at least one bin per axis")
        if not self.elevation_max > self.elevation_min:
            raise ValueError("elevation_max must exceed elevation_min")


@dataclass(frozen=True)
class ShiftSpec:
    """Square grid of planar shifts: -extent..extent in steps of ``step`` per axis."""

    extent: float = 1.0
    step: float = 0.2

    def shifts(self) -> np.ndarray:
        if not (self.step > 0 and self.extent >= 0):
            raise ValueError("shift grid needs step > 0 and extent >= 0")
        n = int(math.floor(self.extent / self.step + 1e-9))
        axis = np.arange(-n, n + 1) * self.step
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel()])


@dataclass(frozen=True)
class FactorConfig:
    image: DepthImageSpec = field(default_factory=DepthImageSpec)
    normal_bins: int = 18
    # cells whose normal has |n_z| above this are horizontal surfaces; their azimuth is noise
    max_normal_z: float = 0.9
    shifts: ShiftSpec = field(default_factory=ShiftSpec)


@dataclass(frozen=True, eq=False)
class LocalVicinity:
    """Cells of ``ndt_map`` (row indices) whose mean lies within ``range`` of ``center``."""

    ndt_map: NdtMap
    center: np.ndarray
    range: float
    indices: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def means(self) -> np.ndarray:
        return self.ndt_map.means[self.indices]

    @property
    def sigmas(self) -> np.ndarray:
        return self.ndt_map.sigmas[self.indices]

    @property
    def axes(self) -> np.ndarray:
        return self.ndt_map.axes[self.indices]

    def cells(self) -> List[NdCell]:
        return [self.ndt_map.cell(int(i)) for i in self.indices]

    def mask(self) -> np.ndarray:
        m = np.zeros(max(len(self.ndt_map), 1), dtype=np.bool_)
        m[self.indices] = True
        return m


@dataclass(frozen=True)
class FactorVector:
    range: float
    feature_count: int
    d1_count: int
    d2_count: int
    d3_count: int
    d1_ratio: float
    d2_ratio: float
    d3_ratio: float
    occupancy_ratio: float
    normal_entropy: float
    r_average: Optional[float]  # None when the vicinity is empty
    score_entropy: float

    def values(self) -> List[Optional[float]]:
        """Feature values in ``FEATURE_COLUMNS`` order."""
        return [getattr(self, name) for name in FEATURE_COLUMNS]


FEATURE_COLUMNS: Tuple[str, ...] = tuple(f.name for f in fields(FactorVector) if f.name != "range")


def extract_vicinity(ndt_map: NdtMap, center, range_m: float) -> LocalVicinity:
    if not range_m > 0:
        raise ValueError(f"range must be positive, got {range_m}")
    c = np.asarray(center, dtype=float).reshape(3)
    if len(ndt_map) == 0:
        return LocalVicinity(ndt_map, c, float(range_m), np.empty(0, dtype=np.int64))
    d = np.sqrt(np.sum((ndt_map.means - c) ** 2, axis=1))
    return LocalVicinity(ndt_map, c, float(range_m), np.nonzero(d <= range_m)[0])


def dimension_behavior_from_sigmas(sigmas) -> DimensionBehavior:
    s1, s2, s3 = (float(x) for x in sigmas)
    if not s1 > 0:
        raise ValueError("largest sigma must be positive")
    a = ((s1 - s2) / s1, (s2 - s3) / s1, s3 / s1)
    # ties go to the higher dimension
    best = 2
    for k in (1, 0):
        if a[k] > a[best]:
            best = k
    return DimensionBehavior(a[0], a[1], a[2], Dim(best + 1))


def dimension_behavior(cell: NdCell) -> DimensionBehavior:
    return dimension_behavior_from_sigmas(cell.eigen_sigmas)


def _classes(sig: np.ndarray) -> np.ndarray:
    """Vectorised class (1, 2, 3) per row of descending sigmas, same tie rule."""
    if len(sig) == 0:
        return np.empty(0, dtype=np.int64)
    s1 = sig[:, 0]
    a = np.column_stack([(s1 - sig[:, 1]) / s1, (sig[:, 1] - sig[:, 2]) / s1, sig[:, 2] / s1])
    # argmax over reversed columns picks the highest dimension on ties
    return 3 - np.argmax(a[:, ::-1], axis=1)


def dimension_census(vicinity: LocalVicinity):
    """((d1, d2, d3) counts, (d1, d2, d3) ratios)."""
    cls = _classes(vicinity.sigmas)
    counts = tuple(int(np.sum(cls == k)) for k in (1, 2, 3))
    n = len(cls)
    ratios = tuple(c / n for c in counts) if n else (0.0, 0.0, 0.0)
    return counts, ratios


def occupancy_ratio(vicinity: LocalVicinity, image: DepthImageSpec = DepthImageSpec()) -> float:
    """Fraction of depth-image pixels hit by at least one cell mean."""
    image.validate()
    total = image.azimuth_bins * image.elevation_bins
    if len(vicinity) == 0:
        return 0.0
    d = vicinity.means - vicinity.center
    az = np.arctan2(d[:, 1], d[:, 0])
    el = np.degrees(np.arctan2(d[:, 2], np.hypot(d[:, 0], d[:, 1])))
    span = image.elevation_max - image.elevation_min
    inside = (el >= image.elevation_min) & (el <= image.elevation_max)
    ia = np.floor((az + math.pi) / (2 * math.pi) * image.azimuth_bins).astype(np.int64)
    ie = np.floor((el - image.elevation_min) / span * image.elevation_bins).astype(np.int64)
    ia = np.clip(ia, 0, image.azimuth_bins - 1)[inside]
    ie = np.clip(ie, 0, image.elevation_bins - 1)[inside]
    occupied = np.unique(ia * image.elevation_bins + ie)
    return len(occupied) / total


def entropy_bits(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=float)
    p = p[p > 0]
    if p.size == 0:
        return 0.0
    return float(max(0.0, -np.sum(p * np.log2(p))))


def plane_normals(vicinity: LocalVicinity, max_normal_z: float = 0.9) -> np.ndarray:
    """Normals (smallest-sigma axis) of the plane-like cells, horizontal surfaces dropped."""
    if len(vicinity) == 0:
        return np.empty((0, 3))
    keep = _classes(vicinity.sigmas) == 2
    normals = vicinity.axes[keep][:, :, 2]
    return normals[np.abs(normals[:, 2]) <= max_normal_z]


def normal_azimuth_histogram(normals: np.ndarray, bins: int) -> np.ndarray:
    # a normal and its negation are the same plane, so fold azimuth into [0, pi)
    az = np.mod(np.arctan2(normals[:, 1], normals[:, 0]), math.pi)
    idx = np.clip(np.floor(az / math.pi * bins).astype(np.int64), 0, bins - 1)
    return np.bincount(idx, minlength=bins)


def normal_entropy(vicinity: LocalVicinity, bins: int = 18, max_normal_z: float = 0.9) -> float:
    if bins < 2:
        raise ValueError("normal histogram needs at least 2 bins")
    normals = plane_normals(vicinity, max_normal_z)
    if len(normals) == 0:
        return 0.0
    hist = normal_azimuth_histogram(normals, bins)
    return entropy_bits(hist / hist.sum())


def r_average(vicinity: LocalVicinity) -> float:
    """Mean distance from the query point to the cell means."""
    if len(vicinity) == 0:
        raise UndefinedFactorError("r_average is undefined for an empty vicinity")
    return float(np.mean(np.sqrt(np.sum((vicinity.means - vicinity.center) ** 2, axis=1))))


def pseudo_scan(vicinity: LocalVicinity) -> np.ndarray:
    """Each cell mean plus the points at +-sigma along its two widest axes."""
    mu = vicinity.means
    if len(mu) == 0:
        return np.empty((0, 3))
    sig = vicinity.sigmas
    ax = vicinity.axes
    parts = [mu]
    for k in (0, 1):
        off = ax[:, :, k] * sig[:, k:k + 1]
        parts.append(mu + off)
        parts.append(mu - off)
    return np.concatenate(parts, axis=0)


def shift_scores(ndt_map: NdtMap, vicinity: LocalVicinity, shifts: np.ndarray) -> np.ndarray:
    """Score of the vicinity's pseudo-scan against the vicinity itself, per planar shift."""
    pts = pseudo_scan(vicinity)
    out = np.zeros(len(shifts))
    if len(pts) == 0:
        return out
    mask = vicinity.mask()
    for i, (vx, vy) in enumerate(shifts):
        out[i] = _evaluate(ndt_map, pts, Pose(float(vx), float(vy)), False, mask)[0]
    return out


def score_entropy(ndt_map: NdtMap, center, range_m: float, shift_spec: ShiftSpec = ShiftSpec(),
                  vicinity: Optional[LocalVicinity] = None) -> float:
    """Entropy (bits) of the normalised self-registration scores over the shift grid."""
    if vicinity is None:
        vicinity = extract_vicinity(ndt_map, center, range_m)
    shifts = shift_spec.shifts()
    s = shift_scores(ndt_map, vicinity, shifts)
    total = s.sum()
    if not total > 0:
        return math.log2(len(shifts))
    return min(entropy_bits(s / total), math.log2(len(shifts)))


def factor_vector(ndt_map: NdtMap, center, range_m: float,
                  config: FactorConfig = FactorConfig()) -> FactorVector:
    vic = extract_vicinity(ndt_map, center, range_m)
    (c1, c2, c3), (r1, r2, r3) = dimension_census(vic)
    try:
        r_avg: Optional[float] = r_average(vic)
    except UndefinedFactorError:
        r_avg = None
    return FactorVector(
        range=float(range_m),
        feature_count=len(vic),
        d1_count=c1,
        d2_count=c2,
        d3_count=c3,
        d1_ratio=r1,
        d2_ratio=r2,
        d3_ratio=r3,
        occupancy_ratio=occupancy_ratio(vic, config.image),
        normal_entropy=normal_entropy(vic, config.normal_bins, config.max_normal_z),
        r_average=r_avg,
        score_entropy=score_entropy(ndt_map, vic.center, range_m, config.shifts, vic),
    )


# --- CSV -------------------------------------------------------------------

_INT_COLUMNS = {"feature_count", "d1_count", "d2_count", "d3_count"}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_factors_csv(path: PathLike, rows: Iterable[Tuple[int, FactorVector]]) -> None:
    """``waypoint_id, range`` then one column per factor; missing values are empty fields."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {FACTORS_CSV_VERSION}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["waypoint_id", "range", *FEATURE_COLUMNS])
        for wid, fv in rows:
            w.writerow([str(int(wid)), _fmt(fv.range), *(_fmt(v) for v in fv.values())])


def read_factors_csv(path: PathLike) -> List[Tuple[int, FactorVector]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    expected = ["waypoint_id", "range", *FEATURE_COLUMNS]
    if reader.fieldnames != expected:
        raise ValueError(f"{path}: unexpected factor columns {reader.fieldnames}")
    out = []
    for rec in reader:
        vals = {}
        for name in FEATURE_COLUMNS:
            raw = rec[name]
            if raw == "":
                vals[name] = None
            elif name in _INT_COLUMNS:
                vals[name] = int(raw)
            else:
                vals[name] = float(raw)
        out.append((int(rec["waypoint_id"]), FactorVector(range=float(rec["range"]), **vals)))
    return out


def factor_table(ndt_map: NdtMap, centers: Sequence, ranges: Sequence[float],
                 config: FactorConfig = FactorConfig()) -> List[List[FactorVector]]:
    """``table[i][j]`` is the factor vector of centers[i] at ranges[j]."""
    return [[factor_vector(ndt_map, c, r, config) for r in ranges] for c in centers]
