"""Experiment orchestration: ground truth, offset evaluation, range sweeps,
training, dynamic-vs-static comparison and CSV reports.

Files written by the pipeline are split so that everything except the
``*timing*`` files is bitwise reproducible for a fixed seed and config.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .cloud import PathLike, Pose, PointCloud, crop_range, voxel_filter
from .factors import DepthImageSpec, FactorConfig, FactorVector, ShiftSpec, factor_vector
from .forest import Dataset, ForestModel, ForestParams, evaluate_model, train_forest
from .ndt import NdtMap, RegConfig, build_ndt_map, register, warmup
from .planner import RangeProfile, build_range_profile
from .scene import SceneSpec, Trajectory, default_scene_spec, make_trajectory, rng_stream, \
    scene_spec_from_dict, scene_spec_to_dict, simulate_scan

REPORT_VERSION = "v1"
TIMING_MODES = ("serial", "parallel")


def planar_offsets(radius: float, count: int) -> Tuple[Pose, ...]:
    """Identity plus ``count`` planar offsets on a circle, yaw offset 0."""
    out = [Pose()]
    for k in range(count):
        a = 2 * math.pi * k / count
        out.append(Pose(radius * math.cos(a), radius * math.sin(a), 0.0))
    return tuple(out)


@dataclass(frozen=True)
class EvalConfig:
    subsample_leaf: float = 0.5
    cell_size: float = 1.0
    offsets: Tuple[Pose, ...] = planar_offsets(0.25, 8)
    candidate_ranges: Tuple[float, ...] = tuple(float(r) for r in range(10, 55, 5))
    gt_range: float = 100.0
    threshold_cm: float = 10.0
    seed: int = 0
    timing_mode: str = "serial"
    waypoint_spacing: float = 10.0
    holdout_fraction: float = 0.2
    workers: int = 0  # parallel mode thread count, 0 = cpu count
    forest: ForestParams = ForestParams()
    factors: FactorConfig = FactorConfig()
    registration: RegConfig = RegConfig()
    scene: Optional[SceneSpec] = None  # None: default corpus for ``seed``

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(self.offsets))
        object.__setattr__(self, "candidate_ranges", tuple(float(r) for r in self.candidate_ranges))

    def validate(self) -> None:
        if not (self.subsample_leaf > 0 and self.cell_size > 0):
            raise ValueError("subsample_leaf and cell_size must be positive")
        if not self.offsets or not any(np.allclose(o.vector, 0.0) for o in self.offsets):
            raise ValueError("offsets must be nonempty and include the identity")
        cands = self.candidate_ranges
        if not cands or any(b <= a for a, b in zip(cands, cands[1:])) or cands[0] <= 0:
            raise ValueError("candidate_ranges must be positive and strictly ascending")
        if self.gt_range < cands[-1]:
            raise ValueError("gt_range must be at least the largest candidate range")
        if self.timing_mode not in TIMING_MODES:
            raise ValueError(f"timing_mode must be one of {TIMING_MODES}")
        if not 0.0 < self.holdout_fraction < 1.0:
            raise ValueError("holdout_fraction must be in (0, 1)")
        self.forest.validate()

    def scene_spec(self) -> SceneSpec:
        return self.scene if self.scene is not None else default_scene_spec(self.seed)


# --- config file ---------------------------------------------------------------


def config_to_dict(cfg: EvalConfig) -> dict:
    d = {
        "subsample_leaf": cfg.subsample_leaf,
        "cell_size": cfg.cell_size,
        "offsets": [[float(v) for v in o.vector] for o in cfg.offsets],
        "candidate_ranges": list(cfg.candidate_ranges),
        "gt_range": cfg.gt_range,
        "threshold_cm": cfg.threshold_cm,
        "seed": cfg.seed,
        "timing_mode": cfg.timing_mode,
        "waypoint_spacing": cfg.waypoint_spacing,
        "holdout_fraction": cfg.holdout_fraction,
        "workers": cfg.workers,
        "forest": asdict(cfg.forest),
        "factors": {
            "image": asdict(cfg.factors.image),
            "normal_bins": cfg.factors.normal_bins,
            "max_normal_z": cfg.factors.max_normal_z,
            "shifts": asdict(cfg.factors.shifts),
        },
        "registration": asdict(cfg.registration),
    }
    if cfg.scene is not None:
        d["scene"] = scene_spec_to_dict(cfg.scene)
    return d


_SIMPLE_KEYS = {"subsample_leaf": float, "cell_size": float, "gt_range": float, "threshold_cm": float,
                "seed": int, "timing_mode": str, "waypoint_spacing": float, "holdout_fraction": float,
                "workers": int}


def config_from_dict(raw: dict) -> EvalConfig:
    raw = dict(raw or {})
    kw = {}
    for key, conv in _SIMPLE_KEYS.items():
        if key in raw:
            kw[key] = conv(raw.pop(key))
    if "offsets" in raw:
        offs = raw.pop("offsets")
        if isinstance(offs, dict):
            kw["offsets"] = planar_offsets(float(offs.get("radius", 0.25)), int(offs.get("count", 8)))
        else:
            kw["offsets"] = tuple(Pose.from_vector(list(o) + [0.0] * (6 - len(o))) for o in offs)
    if "candidate_ranges" in raw:
        kw["candidate_ranges"] = tuple(float(r) for r in raw.pop("candidate_ranges"))
    if "forest" in raw:
        kw["forest"] = ForestParams(**raw.pop("forest"))
    if "factors" in raw:
        f = dict(raw.pop("factors"))
        kw["factors"] = FactorConfig(
            image=DepthImageSpec(**f.pop("image", {})),
            shifts=ShiftSpec(**f.pop("shifts", {})),
            **f,
        )
    if "registration" in raw:
        kw["registration"] = RegConfig(**raw.pop("registration"))
    if "scene" in raw:
        kw["scene"] = scene_spec_from_dict(raw.pop("scene"))
    if raw:
        raise ValueError(f"unknown config keys: {sorted(raw)}")
    cfg = EvalConfig(**kw)
    cfg.validate()
    return cfg


def load_config(path: Optional[PathLike]) -> EvalConfig:
    if path is None:
        return EvalConfig()
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def dump_config(path: PathLike, cfg: EvalConfig) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


# --- measurement -----------------------------------------------------------------


@dataclass(frozen=True)
class GroundTruth:
    waypoint_id: int
    nominal: Pose
    pose: Pose
    converged: bool
    score: float


@dataclass(frozen=True)
class OffsetRun:
    error_cm: float
    rotation_error_deg: float
    time_ms: float
    converged: bool


@dataclass(frozen=True)
class WaypointEval:
    """Offset-averaged result of one waypoint at one range."""

    mean_error_cm: float  # +inf when every offset diverged
    mean_time_ms: float
    max_time_ms: float
    mean_rotation_error_deg: float
    n_diverged: int
    runs: Tuple[OffsetRun, ...]

    @property
    def flagged(self) -> bool:
        return self.n_diverged == len(self.runs)


@dataclass
class WaypointReport:
    waypoint_id: int
    ranges: Tuple[float, ...]
    evals: List[WaypointEval]
    factors: List[Optional[FactorVector]] = field(default_factory=list)

    @property
    def mean_error_cm(self) -> np.ndarray:
        return np.array([e.mean_error_cm for e in self.evals])

    @property
    def mean_time_ms(self) -> np.ndarray:
        return np.array([e.mean_time_ms for e in self.evals])

    @property
    def max_time_ms(self) -> np.ndarray:
        return np.array([e.max_time_ms for e in self.evals])


def subsampled_scan(spec: SceneSpec, true_pose: Pose, waypoint_id: int, cfg: EvalConfig) -> PointCloud:
    return voxel_filter(simulate_scan(spec, true_pose, cfg.gt_range, waypoint_id), cfg.subsample_leaf)


def compute_ground_truth(ndt_map: NdtMap, scan: PointCloud, nominal: Pose, gt_range: float,
                         config: RegConfig = RegConfig(), waypoint_id: int = -1) -> GroundTruth:
    """Register the ``gt_range`` crop of the scan from the nominal pose."""
    local = crop_range(scan, (0.0, 0.0, 0.0), gt_range)
    if len(local) == 0:
        raise ValueError("scan has no points within gt_range")
    res = register(ndt_map, local, nominal, config)
    return GroundTruth(waypoint_id, nominal, res.pose, res.converged, res.final_score)


def _rotation_error_deg(a: Pose, b: Pose) -> float:
    r = a.rotation().T @ b.rotation()
    c = max(-1.0, min(1.0, (np.trace(r) - 1.0) / 2.0))
    return math.degrees(math.acos(c))


def evaluate_waypoint(ndt_map: NdtMap, scan: PointCloud, gt_pose: Pose, range_m: float,
                      config: EvalConfig) -> WaypointEval:
    """Register the range-cropped scan from every offset around the ground truth."""
    local = crop_range(scan, (0.0, 0.0, 0.0), range_m)
    runs = []
    for off in config.offsets:
        start = gt_pose.compose(off)
        if len(local) == 0:
            runs.append(OffsetRun(math.inf, math.inf, 0.0, False))
            continue
        res = register(ndt_map, local, start, config.registration)
        err = float(np.linalg.norm(res.pose.translation - gt_pose.translation)) * 100.0
        runs.append(OffsetRun(err, _rotation_error_deg(res.pose, gt_pose), res.matching_time, res.converged))
    n_div = sum(not r.converged for r in runs)
    times = [r.time_ms for r in runs]
    if n_div == len(runs):
        mean_err = mean_rot = math.inf
    else:
        mean_err = float(np.mean([r.error_cm for r in runs]))
        mean_rot = float(np.mean([r.rotation_error_deg for r in runs]))
    return WaypointEval(mean_err, float(np.mean(times)), float(np.max(times)), mean_rot, n_div, tuple(runs))


@dataclass
class Experiment:
    """Everything derived from one config: scene, map, trajectory, scans and ground truth."""

    config: EvalConfig
    spec: SceneSpec
    ndt_map: NdtMap
    trajectory: Trajectory
    scans: Dict[int, PointCloud] = field(default_factory=dict)
    ground_truth: Dict[int, GroundTruth] = field(default_factory=dict)

    @property
    def valid_ids(self) -> List[int]:
        return [i for i in range(len(self.trajectory)) if self.ground_truth[i].converged]

    @property
    def excluded_ids(self) -> List[int]:
        return [i for i in range(len(self.trajectory)) if not self.ground_truth[i].converged]


def prepare_experiment(config: EvalConfig, map_cloud: Optional[PointCloud] = None,
                       ndt_map: Optional[NdtMap] = None) -> Experiment:
    from .scene import generate_scene

    config.validate()
    spec = config.scene_spec()
    if ndt_map is None:
        if map_cloud is None:
            map_cloud = generate_scene(spec)
        ndt_map = build_ndt_map(map_cloud, config.cell_size)
    traj = make_trajectory(spec, config.waypoint_spacing)
    exp = Experiment(config, spec, ndt_map, traj)

    def gt(i: int):
        scan = subsampled_scan(spec, traj.pose(i), i, config)
        return i, scan, compute_ground_truth(ndt_map, scan, traj.pose(i), config.gt_range,
                                             config.registration, i)

    for i, scan, g in _map(config, gt, range(len(traj))):
        exp.scans[i] = scan
        exp.ground_truth[i] = g
    return exp


def _map(config: EvalConfig, fn, items):
    items = list(items)
    if config.timing_mode == "parallel" and len(items) > 1:
        workers = config.workers or os.cpu_count() or 1
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def sweep_ranges(exp: Experiment, with_factors: bool = True) -> List[WaypointReport]:
    """Every valid waypoint at every candidate range: offset evaluation plus factors."""
    cfg = exp.config
    warmup()

    def one(i: int) -> WaypointReport:
        gt = exp.ground_truth[i]
        evals = [evaluate_waypoint(exp.ndt_map, exp.scans[i], gt.pose, r, cfg) for r in cfg.candidate_ranges]
        return WaypointReport(i, cfg.candidate_ranges, evals)

    reports = _map(cfg, one, exp.valid_ids)
    if with_factors:
        for rep in reports:
            rep.factors = [factor_vector(exp.ndt_map, exp.trajectory.positions[rep.waypoint_id], r, cfg.factors)
                           for r in cfg.candidate_ranges]
    return reports


def route_summary(reports: Sequence[WaypointReport]) -> Dict[str, np.ndarray]:
    """Route means per range. Flagged (+inf) entries are counted, not averaged."""
    if not reports:
        raise ValueError("no waypoint reports")
    err = np.array([r.mean_error_cm for r in reports])
    t = np.array([r.mean_time_ms for r in reports])
    tmax = np.array([r.max_time_ms for r in reports])
    finite = np.isfinite(err)
    mean_err = np.array([err[finite[:, j], j].mean() if finite[:, j].any() else math.inf
                         for j in range(err.shape[1])])
    return {
        "range": np.array(reports[0].ranges),
        "mean_error_cm": mean_err,
        "mean_time_ms": t.mean(axis=0),
        "max_time_ms": tmax.max(axis=0),
        "n_waypoints": np.full(err.shape[1], len(reports)),
        "n_flagged": (~finite).sum(axis=0),
    }


# --- datasets and models ----------------------------------------------------------


def build_dataset(reports: Sequence[WaypointReport]) -> Tuple[Dataset, int]:
    """Training rows from a sweep; rows with a flagged (+inf) target are left out and counted."""
    rows = []
    dropped = 0
    for rep in reports:
        for r, ev, fv in zip(rep.ranges, rep.evals, rep.factors):
            if not math.isfinite(ev.mean_error_cm):
                dropped += 1
                continue
            rows.append((fv, ev.mean_error_cm, rep.waypoint_id, r))
    return Dataset.from_rows(rows), dropped


def split_waypoints(ids: Sequence[int], fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """(train ids, holdout ids); whole waypoints go to one side so ranges never leak."""
    ids = np.unique(np.asarray(ids, dtype=np.int64))
    perm = rng_stream(seed, "holdout-split").permutation(len(ids))
    k = max(1, int(round(fraction * len(ids))))
    hold = np.sort(ids[perm[:k]])
    train = np.sort(ids[perm[k:]])
    return train, hold


def train_models(data: Dataset, ranges: Sequence[float], params: ForestParams) -> Dict[float, ForestModel]:
    models = {}
    for r in ranges:
        sub = data.at_range(r)
        if len(sub) == 0:
            raise ValueError(f"no training rows at range {r}")
        models[float(r)] = train_forest(sub, params, float(r))
    return models


@dataclass(frozen=True)
class HoldoutReport:
    ranges: Tuple[float, ...]
    n_train: Tuple[int, ...]
    n_holdout: Tuple[int, ...]
    mae: Tuple[float, ...]
    mse: Tuple[float, ...]
    variance: Tuple[float, ...]
    pooled_mse: float
    pooled_variance: float
    pooled_mae: float


def holdout_evaluation(data: Dataset, ranges: Sequence[float], config: EvalConfig) -> HoldoutReport:
    train_ids, hold_ids = split_waypoints(data.waypoint_ids, config.holdout_fraction, config.seed)
    is_hold = np.isin(data.waypoint_ids, hold_ids)
    train, hold = data.subset(~is_hold), data.subset(is_hold)
    models = train_models(train, ranges, config.forest)
    rows = []
    preds, targets = [], []
    for r in ranges:
        h = hold.at_range(r)
        m = models[float(r)]
        mae, mse = evaluate_model(m, h)
        rows.append((len(train.at_range(r)), len(h), mae, mse, float(np.var(h.y))))
        preds.append(m.predict_matrix(h.X))
        targets.append(h.y)
    p = np.concatenate(preds)
    y = np.concatenate(targets)
    n_train, n_hold, mae, mse, var = zip(*rows)
    return HoldoutReport(tuple(float(r) for r in ranges), n_train, n_hold, mae, mse, var,
                         float(np.mean((p - y) ** 2)), float(np.var(y)), float(np.mean(np.abs(p - y))))


# --- dynamic vs static ---------------------------------------------------------------


@dataclass(frozen=True)
class ComparisonRow:
    waypoint_id: int
    dynamic_range: float
    dynamic: WaypointEval
    static: WaypointEval


@dataclass(frozen=True)
class ComparisonReport:
    rows: Tuple[ComparisonRow, ...]
    threshold_cm: float
    static_range: float
    excluded: Tuple[int, ...]

    def _stats(self, which: str) -> Dict[str, float]:
        evs = [getattr(r, which) for r in self.rows]
        err = np.array([e.mean_error_cm for e in evs])
        fin = np.isfinite(err)
        return {
            "mean_time_ms": float(np.mean([e.mean_time_ms for e in evs])),
            "max_time_ms": float(np.max([e.max_time_ms for e in evs])),
            "mean_error_cm": float(err[fin].mean()) if fin.any() else math.inf,
            "pct_within_threshold": 100.0 * float(np.mean(err <= self.threshold_cm)),
            "n_flagged": int((~fin).sum()),
        }

    @property
    def dynamic(self) -> Dict[str, float]:
        return self._stats("dynamic")

    @property
    def static(self) -> Dict[str, float]:
        return self._stats("static")

    @property
    def mean_dynamic_range(self) -> float:
        return float(np.mean([r.dynamic_range for r in self.rows]))


def run_dynamic_comparison(exp: Experiment, profile: RangeProfile) -> ComparisonReport:
    """Each waypoint at its planned range and at the static maximum range."""
    if len(profile) != len(exp.trajectory):
        raise ValueError("profile does not match the trajectory")
    for e in profile.entries:
        if not np.allclose(e.position, exp.trajectory.positions[e.waypoint_id], atol=1e-6):
            raise ValueError(f"profile entry {e.waypoint_id} is not at the trajectory waypoint")
    cfg = exp.config
    static_r = max(profile.candidate_ranges)
    warmup()

    def one(i: int) -> ComparisonRow:
        gt = exp.ground_truth[i].pose
        r = profile.entries[i].selected_range
        dyn = evaluate_waypoint(exp.ndt_map, exp.scans[i], gt, r, cfg)
        sta = evaluate_waypoint(exp.ndt_map, exp.scans[i], gt, static_r, cfg)
        return ComparisonRow(i, r, dyn, sta)

    rows = _map(cfg, one, exp.valid_ids)
    return ComparisonReport(tuple(rows), profile.threshold_cm, static_r, tuple(exp.excluded_ids))


# --- reports ------------------------------------------------------------------------


def _num(v) -> str:
    return repr(float(v))


def _writer(path: PathLike, kind: str, columns: Sequence[str], meta: str = ""):
    fh = open(path, "w", newline="")
    fh.write(f"# ndtrange-{kind} {REPORT_VERSION}{(' ' + meta) if meta else ''}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(columns)
    return fh, w


SWEEP_ERROR_COLUMNS = ("waypoint_id", "range", "mean_error_cm", "mean_rotation_error_deg", "n_offsets",
                       "n_diverged", "flagged")
SWEEP_TIMING_COLUMNS = ("waypoint_id", "range", "mean_time_ms", "max_time_ms")
SUMMARY_COLUMNS = ("range", "mean_error_cm", "mean_time_ms", "max_time_ms", "n_waypoints", "n_flagged")
OFFSET_COLUMNS = ("waypoint_id", "range", "offset", "error_cm", "rotation_error_deg", "converged")
PLOT_COLUMNS = ("series", "waypoint_id", "range", "metric", "value")


def emit_report(reports: Sequence[WaypointReport], out_dir: PathLike, fmt: str = "csv",
                timing_mode: str = "serial") -> List[Path]:
    """Write sweep results; ``csv`` gives wide tables, ``plotdata`` a long table."""
    if not reports:
        raise ValueError("no reports to emit")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "csv":
        p = out / "sweep_errors.csv"
        fh, w = _writer(p, "sweep-errors", SWEEP_ERROR_COLUMNS)
        with fh:
            for rep in reports:
                for r, ev in zip(rep.ranges, rep.evals):
                    w.writerow([rep.waypoint_id, _num(r), _num(ev.mean_error_cm), _num(ev.mean_rotation_error_deg),
                                len(ev.runs), ev.n_diverged, int(ev.flagged)])
        written.append(p)
        p = out / "sweep_offsets.csv"
        fh, w = _writer(p, "sweep-offsets", OFFSET_COLUMNS)
        with fh:
            for rep in reports:
                for r, ev in zip(rep.ranges, rep.evals):
                    for k, run in enumerate(ev.runs):
                        w.writerow([rep.waypoint_id, _num(r), k, _num(run.error_cm),
                                    _num(run.rotation_error_deg), int(run.converged)])
        written.append(p)
        p = out / "sweep_timing.csv"
        fh, w = _writer(p, "sweep-timing", SWEEP_TIMING_COLUMNS, f"timing_mode={timing_mode}")
        with fh:
            for rep in reports:
                for r, ev in zip(rep.ranges, rep.evals):
                    w.writerow([rep.waypoint_id, _num(r), _num(ev.mean_time_ms), _num(ev.max_time_ms)])
        written.append(p)
        p = out / "summary_timing.csv"
        s = route_summary(reports)
        fh, w = _writer(p, "summary", SUMMARY_COLUMNS, f"timing_mode={timing_mode}")
        with fh:
            for j in range(len(s["range"])):
                w.writerow([_num(s["range"][j]), _num(s["mean_error_cm"][j]), _num(s["mean_time_ms"][j]),
                            _num(s["max_time_ms"][j]), int(s["n_waypoints"][j]), int(s["n_flagged"][j])])
        written.append(p)
    elif fmt == "plotdata":
        p = out / "plotdata_timing.csv"
        fh, w = _writer(p, "plotdata", PLOT_COLUMNS, f"timing_mode={timing_mode}")
        with fh:
            for rep in reports:
                for r, ev in zip(rep.ranges, rep.evals):
                    for metric, val in (("error_cm", ev.mean_error_cm), ("time_ms", ev.mean_time_ms),
                                        ("max_time_ms", ev.max_time_ms)):
                        w.writerow(["sweep", rep.waypoint_id, _num(r), metric, _num(val)])
            s = route_summary(reports)
            for j, r in enumerate(s["range"]):
                for metric in ("mean_error_cm", "mean_time_ms", "max_time_ms"):
                    w.writerow(["route", "", _num(r), metric, _num(s[metric][j])])
        written.append(p)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return written


def _read_rows(path: PathLike, columns: Sequence[str]) -> List[dict]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    if tuple(reader.fieldnames or ()) != tuple(columns):
        raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
    return list(reader)


def read_sweep(out_dir: PathLike) -> List[WaypointReport]:
    """Rebuild waypoint reports (without factors) from the emitted sweep CSVs."""
    out = Path(out_dir)
    errs = _read_rows(out / "sweep_errors.csv", SWEEP_ERROR_COLUMNS)
    times = _read_rows(out / "sweep_timing.csv", SWEEP_TIMING_COLUMNS)
    offs = _read_rows(out / "sweep_offsets.csv", OFFSET_COLUMNS)
    runs: Dict[Tuple[int, float], List[dict]] = {}
    for o in offs:
        runs.setdefault((int(o["waypoint_id"]), float(o["range"])), []).append(o)
    tmap = {(int(t["waypoint_id"]), float(t["range"])): t for t in times}
    reports: Dict[int, WaypointReport] = {}
    for e in errs:
        wid, r = int(e["waypoint_id"]), float(e["range"])
        t = tmap[(wid, r)]
        rr = tuple(OffsetRun(float(o["error_cm"]), float(o["rotation_error_deg"]), math.nan, o["converged"] == "1")
                   for o in sorted(runs.get((wid, r), []), key=lambda o: int(o["offset"])))
        ev = WaypointEval(float(e["mean_error_cm"]), float(t["mean_time_ms"]), float(t["max_time_ms"]),
                          float(e["mean_rotation_error_deg"]), int(e["n_diverged"]), rr)
        rep = reports.setdefault(wid, WaypointReport(wid, (), []))
        rep.ranges = rep.ranges + (r,)
        rep.evals.append(ev)
    return [reports[k] for k in sorted(reports)]


COMPARISON_COLUMNS = ("mode", "range_m", "mean_time_ms", "max_time_ms", "mean_error_cm",
                      "pct_within_threshold", "n_waypoints", "n_flagged", "n_excluded")
COMPARISON_WAYPOINT_COLUMNS = ("waypoint_id", "dynamic_range_m", "dynamic_error_cm", "dynamic_time_ms",
                               "static_range_m", "static_error_cm", "static_time_ms")


def emit_comparison(report: ComparisonReport, out_dir: PathLike, timing_mode: str = "serial") -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p1 = out / "comparison_timing.csv"
    fh, w = _writer(p1, "comparison", COMPARISON_COLUMNS,
                    f"threshold_cm={report.threshold_cm!r} timing_mode={timing_mode}")
    with fh:
        for mode, stats, rng in (("dynamic", report.dynamic, report.mean_dynamic_range),
                                 ("static", report.static, report.static_range)):
            w.writerow([mode, _num(rng), _num(stats["mean_time_ms"]), _num(stats["max_time_ms"]),
                        _num(stats["mean_error_cm"]), _num(stats["pct_within_threshold"]), len(report.rows),
                        stats["n_flagged"], len(report.excluded)])
    p2 = out / "comparison_waypoints_timing.csv"
    fh, w = _writer(p2, "comparison-waypoints", COMPARISON_WAYPOINT_COLUMNS, f"timing_mode={timing_mode}")
    with fh:
        for r in report.rows:
            w.writerow([r.waypoint_id, _num(r.dynamic_range), _num(r.dynamic.mean_error_cm),
                        _num(r.dynamic.mean_time_ms), _num(report.static_range), _num(r.static.mean_error_cm),
                        _num(r.static.mean_time_ms)])
    return [p1, p2]


GT_COLUMNS = ("waypoint_id", "nominal_x", "nominal_y", "nominal_z", "nominal_yaw", "tx", "ty", "tz", "roll",
              "pitch", "yaw", "converged", "score")


def write_ground_truth(path: PathLike, gts: Sequence[GroundTruth]) -> None:
    fh, w = _writer(path, "ground-truth", GT_COLUMNS)
    with fh:
        for g in gts:
            w.writerow([g.waypoint_id, *(_num(v) for v in (g.nominal.tx, g.nominal.ty, g.nominal.tz, g.nominal.yaw)),
                        *(_num(v) for v in g.pose.vector), int(g.converged), _num(g.score)])


def read_ground_truth(path: PathLike) -> Dict[int, GroundTruth]:
    out = {}
    for r in _read_rows(path, GT_COLUMNS):
        nominal = Pose(float(r["nominal_x"]), float(r["nominal_y"]), float(r["nominal_z"]), 0.0, 0.0,
                       float(r["nominal_yaw"]))
        pose = Pose(*(float(r[k]) for k in ("tx", "ty", "tz", "roll", "pitch", "yaw")))
        out[int(r["waypoint_id"])] = GroundTruth(int(r["waypoint_id"]), nominal, pose, r["converged"] == "1",
                                                 float(r["score"]))
    return out


HOLDOUT_COLUMNS = ("range", "n_train", "n_holdout", "mae_cm", "mse_cm2", "holdout_variance_cm2")


def write_holdout(path: PathLike, rep: HoldoutReport) -> None:
    fh, w = _writer(path, "holdout", HOLDOUT_COLUMNS)
    with fh:
        for j, r in enumerate(rep.ranges):
            w.writerow([_num(r), rep.n_train[j], rep.n_holdout[j], _num(rep.mae[j]), _num(rep.mse[j]),
                        _num(rep.variance[j])])
        w.writerow(["pooled", sum(rep.n_train), sum(rep.n_holdout), _num(rep.pooled_mae), _num(rep.pooled_mse),
                    _num(rep.pooled_variance)])


def with_overrides(cfg: EvalConfig, seed: Optional[int] = None, timing_mode: Optional[str] = None) -> EvalConfig:
    kw = {}
    if seed is not None:
        kw["seed"] = int(seed)
        kw["forest"] = replace(cfg.forest, seed=int(seed))
        if cfg.scene is not None:
            kw["scene"] = replace(cfg.scene, seed=int(seed))
    if timing_mode is not None:
        kw["timing_mode"] = timing_mode
    return replace(cfg, **kw) if kw else cfg


# --- whole pipeline ---------------------------------------------------------------


@dataclass
class PipelineResult:
    experiment: Experiment
    reports: List[WaypointReport]
    dataset: Dataset
    dropped_rows: int
    holdout: HoldoutReport
    models: Dict[float, ForestModel]
    profile: RangeProfile
    comparison: ComparisonReport


def run_pipeline(config: EvalConfig, out_dir: Optional[PathLike] = None) -> PipelineResult:
    """scene -> map -> ground truth -> sweep + factors -> train -> plan -> compare."""
    from .cloud import write_cloud
    from .factors import write_factors_csv
    from .forest import save_model
    from .ndt import write_ndt_map
    from .planner import write_profile_csv
    from .scene import dump_scene_spec, generate_scene

    spec = config.scene_spec()
    cloud = generate_scene(spec)
    exp = prepare_experiment(config, map_cloud=cloud)
    reports = sweep_ranges(exp)
    data, dropped = build_dataset(reports)
    hold = holdout_evaluation(data, config.candidate_ranges, config)
    models = train_models(data, config.candidate_ranges, config.forest)
    factors = {(rep.waypoint_id, r): fv for rep in reports for r, fv in zip(rep.ranges, rep.factors)}
    profile = build_range_profile(models, exp.ndt_map, exp.trajectory, config.threshold_cm,
                                  config.candidate_ranges, config.factors, factors)
    comp = run_dynamic_comparison(exp, profile)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        dump_config(out / "config.yaml", config)
        dump_scene_spec(out / "scene.yaml", spec)
        write_cloud(out / "scene_cloud.txt", cloud)
        write_trajectory_csv(out / "trajectory.csv", exp.trajectory)
        write_ndt_map(out / "ndt_map.txt", exp.ndt_map)
        write_ground_truth(out / "ground_truth.csv", [exp.ground_truth[i] for i in range(len(exp.trajectory))])
        write_factors_csv(out / "factors.csv", sorted(((w, fv) for (w, _), fv in factors.items()),
                                                      key=lambda t: (t[0], t[1].range)))
        emit_report(reports, out, "csv", config.timing_mode)
        emit_report(reports, out, "plotdata", config.timing_mode)
        write_holdout(out / "holdout.csv", hold)
        (out / "models").mkdir(exist_ok=True)
        for r, m in models.items():
            save_model(out / "models" / model_filename(r), m)
        write_profile_csv(out / "profile.csv", profile)
        emit_comparison(comp, out, config.timing_mode)
    return PipelineResult(exp, reports, data, dropped, hold, models, profile, comp)


def model_filename(range_m: float) -> str:
    return f"model_r{float(range_m):g}.txt"


TRAJECTORY_COLUMNS = ("waypoint_id", "x", "y", "z", "yaw")


def write_trajectory_csv(path: PathLike, traj: Trajectory) -> None:
    fh, w = _writer(path, "trajectory", TRAJECTORY_COLUMNS, f"spacing={traj.spacing!r}")
    with fh:
        for i in range(len(traj)):
            p = traj.positions[i]
            w.writerow([i, _num(p[0]), _num(p[1]), _num(p[2]), _num(traj.yaws[i])])


def read_trajectory_csv(path: PathLike) -> Trajectory:
    with open(path) as fh:
        head = fh.readline()
    spacing = float(head.split("spacing=", 1)[1].split()[0]) if "spacing=" in head else math.nan
    rows = _read_rows(path, TRAJECTORY_COLUMNS)
    pos = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows]).reshape(-1, 3)
    yaw = np.array([float(r["yaw"]) for r in rows])
    return Trajectory(pos, yaw, spacing)
