"""Deterministic synthetic street scenes and trajectories.

A route is a chain of straight segments. Each segment kind places a different
set of structures along its local frame (s along the route, l to the left):

* ``corridor``      parallel walls close to the road, along-track is weakly constrained
* ``intersection``  chamfered building corners and a cross street: walls in four orientations
* ``plaza``         wide open ground with distant walls
* ``sparse_road``   ground and poles only

Any segment may also carry street trees (trunk plus a solid crown), which are
the volumetric features NDT locks onto most easily. Surfaces are sampled
uniformly at random with about one point per ``point_spacing`` squared (one per
``point_spacing`` cubed inside crowns) and perturbed with Gaussian noise; no
meshes, no occlusion.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, asdict
from typing import List, Tuple

import numpy as np
import yaml

from .cloud import PathLike, Pose, PointCloud, apply_pose, crop_range

RNG_VERSION = "philox4x64-v1"
KINDS = ("corridor", "plaza", "intersection", "sparse_road")

SENSOR_HEIGHT = 1.8
HALF_WIDTH = {"corridor": 6.5, "intersection": 8.5, "plaza": 25.5, "sparse_road": 10.5}
POLE_RADIUS = 0.3
POLE_HEIGHT = 6.0
CROSS_STREET_HALF = 7.0
CHAMFER = 3.0
CROSS_WALL_DEPTH = 20.0
TRUNK_RADIUS = 0.15
TRUNK_HEIGHT = 2.5
CROWN_RADIUS = 1.5


def rng_stream(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent Philox stream for (seed, purpose, index); order-free across workers."""
    key = zlib.crc32(purpose.encode("utf-8"))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(key, int(index)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SegmentSpec:
    kind: str
    length: float
    wall_height: float = 10.0
    pole_density: float = 2.0  # poles per 100 m
    point_spacing: float = 0.5
    turn: float = 0.0  # heading change in degrees applied at the end of the segment
    tree_density: float = 0.0  # trees per 100 m

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}; expected one of {KINDS}")
        if not self.length > 0:
            raise ValueError("segment length must be positive")
        if not self.point_spacing > 0:
            raise ValueError("point_spacing must be positive")
        if self.wall_height < 0 or self.pole_density < 0 or self.tree_density < 0:
            raise ValueError("wall_height, pole_density and tree_density must be non-negative")


@dataclass(frozen=True)
class SceneSpec:
    segments: Tuple[SegmentSpec, ...]
    noise_sigma: float = 0.02
    seed: int = 0
    start: Tuple[float, float] = (0.0, 0.0)
    heading: float = 0.0  # degrees

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))

    def validate(self) -> None:
        if not self.segments:
            raise ValueError("scene needs at least one segment")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for s in self.segments:
            s.validate()

    @property
    def extent(self) -> Tuple[np.ndarray, np.ndarray]:
        """Axis-aligned bounding box (lo, hi) of the generated geometry, ignoring noise."""
        frames = segment_frames(self)
        corners = []
        for (origin, heading), seg in zip(frames, self.segments):
            hw = HALF_WIDTH[seg.kind] + (CHAMFER + CROSS_WALL_DEPTH if seg.kind == "intersection" else 0.0)
            d = np.array([math.cos(heading), math.sin(heading)])
            n = np.array([-d[1], d[0]])
            for s in (0.0, seg.length):
                for l in (-hw, hw):
                    corners.append(origin + s * d + l * n)
        c = np.array(corners)
        top = max(max(s.wall_height for s in self.segments), POLE_HEIGHT) - SENSOR_HEIGHT
        lo = np.array([c[:, 0].min(), c[:, 1].min(), -SENSOR_HEIGHT])
        hi = np.array([c[:, 0].max(), c[:, 1].max(), top])
        return lo, hi


@dataclass(frozen=True)
class Trajectory:
    positions: np.ndarray  # (n, 3)
    yaws: np.ndarray  # (n,)
    spacing: float

    def __len__(self) -> int:
        return len(self.yaws)

    def pose(self, i: int) -> Pose:
        p = self.positions[i]
        return Pose(p[0], p[1], p[2], 0.0, 0.0, float(self.yaws[i]))

    def poses(self) -> List[Pose]:
        return [self.pose(i) for i in range(len(self))]


def default_scene_spec(seed: int = 0) -> SceneSpec:
    """Mixed corpus used by the experiments: about 600 m of heterogeneous street."""
    segs = [
        SegmentSpec("intersection", 40.0, tree_density=20.0),
        SegmentSpec("corridor", 90.0, pole_density=2.0),
        SegmentSpec("plaza", 70.0, pole_density=3.0, tree_density=6.0),
        SegmentSpec("intersection", 40.0, tree_density=20.0),
        SegmentSpec("sparse_road", 80.0, pole_density=4.0, tree_density=8.0),
        SegmentSpec("corridor", 80.0, wall_height=15.0, pole_density=0.0),
        SegmentSpec("intersection", 40.0, tree_density=20.0),
        SegmentSpec("plaza", 60.0, pole_density=2.0, tree_density=6.0),
        SegmentSpec("corridor", 70.0, pole_density=3.0),
        SegmentSpec("intersection", 40.0, tree_density=20.0),
    ]
    return SceneSpec(tuple(segs), noise_sigma=0.03, seed=seed)


def segment_frames(spec: SceneSpec) -> List[Tuple[np.ndarray, float]]:
    """Start point and heading (radians) of every segment."""
    out = []
    origin = np.array(spec.start, dtype=float)
    heading = math.radians(spec.heading)
    for seg in spec.segments:
        out.append((origin.copy(), heading))
        origin = origin + seg.length * np.array([math.cos(heading), math.sin(heading)])
        heading += math.radians(seg.turn)
    return out


def _rect(rng, origin, u, v, len_u, len_v, step):
    """Uniform random samples on the rectangle origin + a*u + b*v, a in [0, len_u], b in [0, len_v]."""
    n = max(int(round(len_u * len_v / (step * step))), 1)
    a = rng.uniform(0.0, len_u, n)
    b = rng.uniform(0.0, len_v, n)
    return np.asarray(origin, float) + a[:, None] * np.asarray(u, float) + b[:, None] * np.asarray(v, float)


def _ground(rng, s0, s1, l0, l1, step):
    return _rect(rng, (s0, l0, -SENSOR_HEIGHT), (1, 0, 0), (0, 1, 0), s1 - s0, l1 - l0, step)


def _wall(rng, p0, p1, height, step):
    """Vertical wall from (s, l) point p0 to p1."""
    p0 = np.asarray(p0, float)
    d = np.asarray(p1, float) - p0
    length = float(np.hypot(*d))
    if length == 0.0 or height <= 0.0:
        return np.empty((0, 3))
    u = (d[0] / length, d[1] / length, 0.0)
    return _rect(rng, (p0[0], p0[1], -SENSOR_HEIGHT), u, (0, 0, 1), length, height, step)


def pole_positions(seg: SegmentSpec) -> np.ndarray:
    """(s, l) of every pole in the segment frame; evenly spaced, alternating sides."""
    count = int(round(seg.pole_density * seg.length / 100.0))
    if count == 0:
        return np.empty((0, 2))
    side = HALF_WIDTH[seg.kind] - 1.25 if seg.kind != "sparse_road" else 4.25
    s = (np.arange(count) + 0.5) * seg.length / count
    l = np.where(np.arange(count) % 2 == 0, side, -side)
    return np.column_stack([s, l])


def _pole(rng, s, l, step):
    area = 2 * math.pi * POLE_RADIUS * POLE_HEIGHT
    n = max(int(round(4.0 * area / (step * step))), 8)
    ang = rng.uniform(0.0, 2 * math.pi, n)
    z = rng.uniform(0.0, POLE_HEIGHT, n)
    return np.column_stack([s + POLE_RADIUS * np.cos(ang), l + POLE_RADIUS * np.sin(ang), z - SENSOR_HEIGHT])


def tree_positions(seg: SegmentSpec) -> np.ndarray:
    """(s, l) of every tree: evenly spaced along the curbs, staggered across a plaza."""
    count = int(round(seg.tree_density * seg.length / 100.0))
    if count == 0:
        return np.empty((0, 2))
    k = np.arange(count)
    s = (k + 0.5) * seg.length / count
    sign = np.where(k % 2 == 0, -1.0, 1.0)
    if seg.kind == "plaza":
        l = sign * (3.0 + (k * 7.3) % 12.0)
    else:
        l = sign * min(HALF_WIDTH[seg.kind] - 2.0, 9.0)
    return np.column_stack([s, l])


def _tree(rng, s, l, step):
    area = 2 * math.pi * TRUNK_RADIUS * TRUNK_HEIGHT
    n = max(int(round(4.0 * area / (step * step))), 8)
    ang = rng.uniform(0.0, 2 * math.pi, n)
    z = rng.uniform(0.0, TRUNK_HEIGHT, n)
    trunk = np.column_stack([s + TRUNK_RADIUS * np.cos(ang), l + TRUNK_RADIUS * np.sin(ang),
                             z - SENSOR_HEIGHT])
    # crown: uniform inside a ball resting on the trunk
    m = max(int(round(4.0 / 3.0 * math.pi * CROWN_RADIUS ** 3 / step ** 3)), 8)
    u = rng.normal(size=(m, 3))
    u /= np.linalg.norm(u, axis=1)[:, None]
    r = CROWN_RADIUS * rng.uniform(size=m) ** (1.0 / 3.0)
    center = np.array([s, l, TRUNK_HEIGHT + CROWN_RADIUS - SENSOR_HEIGHT])
    return np.concatenate([trunk, center + u * r[:, None]])


def segment_points(seg: SegmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Noise-free surface samples of one segment in its local (s, l, z) frame."""
    step = seg.point_spacing
    L = seg.length
    hw = HALF_WIDTH[seg.kind]
    h = seg.wall_height
    parts = [_ground(rng, 0.0, L, -hw, hw, step)]
    if seg.kind in ("corridor", "plaza"):
        for sign in (1.0, -1.0):
            parts.append(_wall(rng, (0.0, sign * hw), (L, sign * hw), h, step))
    elif seg.kind == "intersection":
        mid = 0.5 * L
        a = mid - CROSS_STREET_HALF  # cross street spans [a, b] along the route
        b = mid + CROSS_STREET_HALF
        far = hw + CHAMFER + CROSS_WALL_DEPTH
        for sign in (1.0, -1.0):
            if a - CHAMFER > 0:
                parts.append(_wall(rng, (0.0, sign * hw), (a - CHAMFER, sign * hw), h, step))
            if b + CHAMFER < L:
                parts.append(_wall(rng, (b + CHAMFER, sign * hw), (L, sign * hw), h, step))
            # chamfered building corners
            parts.append(_wall(rng, (a - CHAMFER, sign * hw), (a, sign * (hw + CHAMFER)), h, step))
            parts.append(_wall(rng, (b + CHAMFER, sign * hw), (b, sign * (hw + CHAMFER)), h, step))
            # facades lining the cross street
            parts.append(_wall(rng, (a, sign * (hw + CHAMFER)), (a, sign * far), h, step))
            parts.append(_wall(rng, (b, sign * (hw + CHAMFER)), (b, sign * far), h, step))
            lo, hi = sorted((sign * hw, sign * far))
            parts.append(_ground(rng, a, b, lo, hi, step))
    for s, l in pole_positions(seg):
        parts.append(_pole(rng, s, l, step))
    for s, l in tree_positions(seg):
        parts.append(_tree(rng, s, l, step))
    return np.concatenate(parts, axis=0)


def _to_world(local: np.ndarray, origin: np.ndarray, heading: float) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    return np.column_stack([
        origin[0] + c * local[:, 0] - s * local[:, 1],
        origin[1] + s * local[:, 0] + c * local[:, 1],
        local[:, 2],
    ])


def sample_scene(spec: SceneSpec, stream: int = 0, noise_sigma: float | None = None,
                 noise_purpose: str = "scene-noise") -> np.ndarray:
    """Surface samples of the whole route in world coordinates.

    ``stream`` selects an independent sampling of the same geometry: 0 is the
    map, scans use 1 + waypoint id.
    """
    spec.validate()
    rng = rng_stream(spec.seed, "scene-sampling", stream)
    chunks = [_to_world(segment_points(seg, rng), origin, heading)
              for (origin, heading), seg in zip(segment_frames(spec), spec.segments)]
    pts = np.concatenate(chunks, axis=0)
    sigma = spec.noise_sigma if noise_sigma is None else noise_sigma
    if sigma > 0:
        pts = pts + rng_stream(spec.seed, noise_purpose, stream).normal(0.0, sigma, pts.shape)
    return pts


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Map cloud of the whole route; bitwise reproducible for a fixed seed."""
    return PointCloud(sample_scene(spec, 0), "map")


def make_trajectory(spec: SceneSpec, spacing: float) -> Trajectory:
    """Waypoints every ``spacing`` meters of arc length along the road centerline."""
    if not spacing > 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    frames = segment_frames(spec)
    lengths = np.array([s.length for s in spec.segments])
    total = float(lengths.sum())
    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    n = int(math.floor(total / spacing + 1e-9)) + 1
    arc = np.arange(n) * spacing
    pos = np.zeros((n, 3))
    yaw = np.zeros(n)
    for i, a in enumerate(arc):
        # a waypoint exactly on a joint belongs to the following segment
        k = int(np.searchsorted(cum, a, side="right") - 1)
        k = min(k, len(lengths) - 1)
        origin, heading = frames[k]
        d = a - cum[k]
        pos[i, :2] = origin + d * np.array([math.cos(heading), math.sin(heading)])
        yaw[i] = math.atan2(math.sin(heading), math.cos(heading))
    return Trajectory(pos, yaw, float(spacing))


def simulate_scan(spec: SceneSpec, true_pose: Pose, max_range: float, waypoint_id: int,
                  noise_sigma: float | None = None) -> PointCloud:
    """Scan at ``true_pose`` in the sensor frame.

    The scene surfaces are resampled with an independent stream per waypoint
    (so scan points never coincide with map points), cropped to ``max_range``
    and perturbed with fresh noise. No occlusion is modelled.
    """
    pts = sample_scene(spec, 1 + int(waypoint_id), noise_sigma, "scan-noise")
    local = crop_range(PointCloud(pts, "scan"), true_pose.translation, max_range)
    return apply_pose(local, true_pose.inverse())


def scene_spec_to_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["segments"] = [asdict(s) for s in spec.segments]
    d["start"] = list(spec.start)
    d["rng"] = RNG_VERSION
    return d


def load_scene_spec(path: PathLike) -> SceneSpec:
    """YAML scene file; see README for the schema."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return scene_spec_from_dict(raw)


def scene_spec_from_dict(raw: dict) -> SceneSpec:
    allowed = {"segments", "noise_sigma", "seed", "start", "heading", "rng"}
    unknown = set(raw) - allowed
    if unknown:
        raise ValueError(f"unknown scene keys: {sorted(unknown)}")
    if raw.get("rng", RNG_VERSION) != RNG_VERSION:
        raise ValueError(f"scene written for PRNG {raw['rng']!r}, this build uses {RNG_VERSION!r}")
    try:
        segs = tuple(SegmentSpec(**s) for s in raw.get("segments", []))
    except TypeError as exc:
        raise ValueError(f"bad segment entry: {exc}") from None
    spec = SceneSpec(
        segs,
        noise_sigma=float(raw.get("noise_sigma", 0.02)),
        seed=int(raw.get("seed", 0)),
        start=tuple(raw.get("start", (0.0, 0.0))),
        heading=float(raw.get("heading", 0.0)),
    )
    spec.validate()
    return spec


def dump_scene_spec(path: PathLike, spec: SceneSpec) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(scene_spec_to_dict(spec), fh, sort_keys=False)
