"""Per-waypoint observation range selection and the embedded range profile."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .cloud import PathLike
from .factors import FactorConfig, factor_vector
from .forest import ForestModel, predict_error
from .ndt import NdtMap
from .scene import Trajectory

PROFILE_CSV_VERSION = "ndtrange-profile v1"
PROFILE_COLUMNS = ("waypoint_id", "x", "y", "z", "selected_range_m", "predicted_error_cm", "satisfied")


@dataclass(frozen=True)
class ProfileEntry:
    waypoint_id: int
    position: Tuple[float, float, float]
    selected_range: float
    predicted_error_cm: float
    satisfied: bool


@dataclass(frozen=True)
class RangeProfile:
    entries: Tuple[ProfileEntry, ...]
    threshold_cm: float
    candidate_ranges: Tuple[float, ...]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def selected_ranges(self) -> np.ndarray:
        return np.array([e.selected_range for e in self.entries])

    @property
    def positions(self) -> np.ndarray:
        return np.array([e.position for e in self.entries], dtype=float).reshape(-1, 3)


def plan_range(predicted: Mapping[float, Optional[float]], threshold_cm: float,
               candidates: Sequence[float]) -> Tuple[float, float, bool]:
    """Shortest candidate whose predicted error is within the threshold.

    Missing predictions count as +inf. When no candidate qualifies the largest
    one is returned with ``satisfied = False``.
    """
    cands = [float(c) for c in candidates]
    if not cands:
        raise ValueError("no candidate ranges")
    if any(b <= a for a, b in zip(cands, cands[1:])):
        raise ValueError("candidate ranges must be strictly ascending")

    def pred(r: float) -> float:
        v = predicted.get(r)
        if v is None:
            # tolerate int keys such as {10: 15.0}
            v = predicted.get(int(r)) if float(r).is_integer() else None
        return math.inf if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

    for r in cands:
        e = pred(r)
        if e <= threshold_cm:
            return r, e, True
    return cands[-1], pred(cands[-1]), False


def build_range_profile(models: Mapping[float, ForestModel], ndt_map: NdtMap, trajectory: Trajectory,
                        threshold_cm: float, candidates: Sequence[float],
                        config: FactorConfig = FactorConfig(),
                        factors: Optional[Dict[Tuple[int, float], object]] = None) -> RangeProfile:
    """Predict the error at every candidate range for every waypoint and plan each one.

    ``factors`` may carry precomputed factor vectors keyed by (waypoint, range).
    """
    cands = tuple(float(c) for c in candidates)
    if set(float(r) for r in models) != set(cands):
        raise ValueError(f"models cover ranges {sorted(models)}, candidates are {list(cands)}")
    entries = []
    for i in range(len(trajectory)):
        pos = trajectory.positions[i]
        pred = {}
        for r in cands:
            fv = factors.get((i, r)) if factors else None
            if fv is None:
                fv = factor_vector(ndt_map, pos, r, config)
            pred[r] = predict_error(models[r], fv)
        rng, err, ok = plan_range(pred, threshold_cm, cands)
        entries.append(ProfileEntry(i, tuple(float(v) for v in pos), rng, err, ok))
    return RangeProfile(tuple(entries), float(threshold_cm), cands)


def lookup_range(profile: RangeProfile, position) -> float:
    """Selected range of the nearest profile entry; ties go to the lower waypoint id."""
    if len(profile) == 0:
        raise ValueError("empty range profile")
    p = np.asarray(position, dtype=float).reshape(3)
    d2 = np.sum((profile.positions - p) ** 2, axis=1)
    best = int(np.argmin(d2))  # first minimum, entries are in waypoint order
    return profile.entries[best].selected_range


def write_profile_csv(path: PathLike, profile: RangeProfile) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {PROFILE_CSV_VERSION} threshold_cm={profile.threshold_cm!r} "
                 f"candidates={','.join(repr(c) for c in profile.candidate_ranges)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for e in profile.entries:
            w.writerow([e.waypoint_id, *(repr(v) for v in e.position), repr(e.selected_range),
                        repr(e.predicted_error_cm), int(e.satisfied)])


def read_profile_csv(path: PathLike) -> RangeProfile:
    with open(path, newline="") as fh:
        head = fh.readline()
        if not head.startswith(f"# {PROFILE_CSV_VERSION}"):
            raise ValueError(f"{path}: not a range profile file")
        meta = dict(tok.split("=", 1) for tok in head[2 + len(PROFILE_CSV_VERSION):].split())
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PROFILE_COLUMNS:
            raise ValueError(f"{path}: unexpected profile columns {reader.fieldnames}")
        entries = tuple(
            ProfileEntry(int(r["waypoint_id"]), (float(r["x"]), float(r["y"]), float(r["z"])),
                         float(r["selected_range_m"]), float(r["predicted_error_cm"]), r["satisfied"] == "1")
            for r in reader
        )
    cands = tuple(float(c) for c in meta["candidates"].split(","))
    return RangeProfile(entries, float(meta["threshold_cm"]), cands)
