"""Random-forest regression (CART trees, MSE splits) written out in numpy.

One model is trained per observation range. Rows are kept in a canonical order
(waypoint id, range, then values) so that the bootstrap streams, which are keyed
by tree index, draw the same rows however the input was shuffled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import kernels
from .cloud import PathLike
from .factors import FEATURE_COLUMNS, FactorVector
from .scene import rng_stream

FOREST_FORMAT_VERSION = "ndtrange-forest v1"
# factor columns that may be missing; each gets a 0/1 indicator feature
MISSING_FLAG_SOURCES: Tuple[str, ...] = ("r_average",)
MODEL_COLUMNS: Tuple[str, ...] = FEATURE_COLUMNS + tuple(f"{c}_missing" for c in MISSING_FLAG_SOURCES)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (NaN = missing) with nonnegative targets in cm."""

    X: np.ndarray
    y: np.ndarray
    waypoint_ids: np.ndarray
    ranges: np.ndarray
    columns: Tuple[str, ...] = FEATURE_COLUMNS

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(len(X), -1)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        wid = np.asarray(self.waypoint_ids, dtype=np.int64).reshape(-1)
        rng = np.asarray(self.ranges, dtype=float).reshape(-1)
        if not (len(X) == len(y) == len(wid) == len(rng)):
            raise ValueError("dataset columns have different lengths")
        if X.shape[1] != len(self.columns):
            raise ValueError(f"{X.shape[1]} feature columns but {len(self.columns)} names")
        if not np.all(np.isfinite(y)) or np.any(y < 0):
            raise ValueError("targets must be finite and nonnegative")
        if np.any(np.isinf(X)):
            raise ValueError("features must be finite or NaN (missing)")
        # canonical row order, independent of how the rows were supplied
        keys = [y] + [X[:, j] for j in range(X.shape[1] - 1, -1, -1)] + [rng, wid]
        order = np.lexsort([np.nan_to_num(k, nan=np.inf) for k in keys])
        for name, arr in (("X", X), ("y", y), ("waypoint_ids", wid), ("ranges", rng)):
            arr = np.ascontiguousarray(arr[order])
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "columns", tuple(self.columns))

    def __len__(self) -> int:
        return len(self.y)

    @classmethod
    def from_rows(cls, rows: Sequence[Tuple[FactorVector, float, int, float]]) -> "Dataset":
        """Rows of (factor vector, measured error cm, waypoint id, range)."""
        X = np.array([[np.nan if v is None else float(v) for v in fv.values()] for fv, *_ in rows],
                     dtype=float).reshape(len(rows), len(FEATURE_COLUMNS))
        y = [r[1] for r in rows]
        wid = [r[2] for r in rows]
        rng = [r[3] for r in rows]
        return cls(X, y, wid, rng, FEATURE_COLUMNS)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.X[mask], self.y[mask], self.waypoint_ids[mask], self.ranges[mask], self.columns)

    def at_range(self, range_m: float) -> "Dataset":
        return self.subset(np.isclose(self.ranges, range_m))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: Optional[int] = 8  # None: grow until leaves are pure or too small
    min_leaf: int = 2
    features_per_split: Optional[int] = None  # None: ceil(d / 3)
    seed: int = 0
    bootstrap: bool = True  # False is a test hook: every tree sees every row once

    def validate(self) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be at least 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be at least 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError("features_per_split must be at least 1")


@dataclass(frozen=True, eq=False)
class Tree:
    """Preorder node arrays; ``feature == -1`` marks a leaf. Left branch is x <= threshold."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray

    def __len__(self) -> int:
        return len(self.feature)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])


@dataclass(frozen=True, eq=False)
class ForestModel:
    trees: Tuple[Tree, ...]
    params: ForestParams
    range: float
    input_columns: Tuple[str, ...]  # factor columns expected from the caller
    medians: np.ndarray  # imputation value per input column

    @property
    def columns(self) -> Tuple[str, ...]:
        """Columns seen by the trees: inputs plus missing-value indicators."""
        return tuple(self.input_columns) + tuple(f"{c}_missing" for c in _flag_sources(self.input_columns))

    def design(self, X: np.ndarray) -> np.ndarray:
        return _design(np.asarray(X, dtype=float), self.input_columns, self.medians)

    def predict_matrix(self, X: np.ndarray) -> np.ndarray:
        Z = self.design(X)
        preds = np.stack([t.predict(Z) for t in self.trees])
        # the clip only removes summation round-off so constant forests stay exact
        return np.clip(preds.mean(axis=0), preds.min(axis=0), preds.max(axis=0))


def _flag_sources(columns: Sequence[str]) -> List[str]:
    return [c for c in MISSING_FLAG_SOURCES if c in columns]


def _design(X: np.ndarray, columns: Sequence[str], medians: np.ndarray) -> np.ndarray:
    flags = [np.isnan(X[:, list(columns).index(c)]).astype(float) for c in _flag_sources(columns)]
    filled = np.where(np.isnan(X), medians[None, :], X)
    return np.ascontiguousarray(np.column_stack([filled, *flags]) if flags else filled)


def column_medians(X: np.ndarray) -> np.ndarray:
    """Median of the present values per column; 0 for a column with none present."""
    out = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        col = X[:, j]
        col = col[~np.isnan(col)]
        if col.size:
            out[j] = float(np.median(col))
    return out


def _leaf_value(y: np.ndarray) -> float:
    # mean, kept inside [min, max] so that constant targets come back exactly
    return float(min(max(y.mean(), y.min()), y.max()))


def _best_split_on(Z: np.ndarray, y: np.ndarray, idx: np.ndarray, features, min_leaf: int):
    """Best (feature, threshold) over ``features`` for rows ``idx``; None if no admissible split.

    Near-ties (within the kernel's rounding tolerance) go to the lowest feature
    and then the lowest threshold, so the result does not hinge on summation order.
    """
    ys_node = y[idx]
    tol = kernels.TIE_TOL * float(np.dot(ys_node, ys_node))
    cols = []
    for f in features:
        order = idx[np.argsort(Z[idx, f], kind="stable")]
        xs = np.ascontiguousarray(Z[order, f])
        ys = np.ascontiguousarray(y[order])
        proxy, _, n_left = kernels.best_split(xs, ys, min_leaf, np.nan)
        if n_left > 0:
            cols.append((proxy, int(f), xs, ys))
    if not cols:
        return None
    top = max(c[0] for c in cols)
    proxy, f, xs, ys = next(c for c in cols if c[0] >= top - tol)
    _, thr, _ = kernels.best_split(xs, ys, min_leaf, top - tol)
    return proxy, f, float(thr)


def _grow(Z, y, idx, params: ForestParams, k_features: int, rng, depth: int, nodes: list) -> int:
    me = len(nodes)
    node = [-1, 0.0, -1, -1, _leaf_value(y[idx]), len(idx)]
    nodes.append(node)
    ys = y[idx]
    if (params.max_depth is not None and depth >= params.max_depth) or len(idx) < 2 * params.min_leaf \
            or ys.min() == ys.max():
        return me
    d = Z.shape[1]
    feats = np.sort(rng.choice(d, size=k_features, replace=False)) if k_features < d else np.arange(d)
    split = _best_split_on(Z, y, idx, feats, params.min_leaf)
    if split is None:
        return me
    _, f, thr = split
    go_left = Z[idx, f] <= thr
    node[0], node[1] = f, thr
    node[2] = _grow(Z, y, idx[go_left], params, k_features, rng, depth + 1, nodes)
    node[3] = _grow(Z, y, idx[~go_left], params, k_features, rng, depth + 1, nodes)
    return me


def _tree_from_nodes(nodes: list) -> Tree:
    arr = list(zip(*nodes))
    return Tree(
        feature=np.array(arr[0], dtype=np.int64),
        threshold=np.array(arr[1], dtype=float),
        left=np.array(arr[2], dtype=np.int64),
        right=np.array(arr[3], dtype=np.int64),
        value=np.array(arr[4], dtype=float),
        n_samples=np.array(arr[5], dtype=np.int64),
    )


def build_tree(Z: np.ndarray, y: np.ndarray, params: ForestParams, tree_index: int = 0) -> Tree:
    """One CART tree on the full design matrix ``Z`` (bootstrap applied here if enabled)."""
    n, d = Z.shape
    k = params.features_per_split or math.ceil(d / 3)
    k = min(k, d)
    if params.bootstrap:
        idx = np.sort(rng_stream(params.seed, "forest-bootstrap", tree_index).integers(0, n, n))
    else:
        idx = np.arange(n)
    rng = rng_stream(params.seed, "forest-features", tree_index)
    nodes: list = []
    _grow(Z, y, idx, params, k, rng, 0, nodes)
    return _tree_from_nodes(nodes)


def train_forest(data: Dataset, params: ForestParams = ForestParams(),
                 range_m: Optional[float] = None) -> ForestModel:
    params.validate()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    if range_m is None:
        rs = np.unique(data.ranges)
        range_m = float(rs[0]) if len(rs) == 1 else float("nan")
    medians = column_medians(data.X)
    Z = _design(data.X, data.columns, medians)
    trees = tuple(build_tree(Z, data.y, params, t) for t in range(params.n_trees))
    med = medians.copy()
    med.setflags(write=False)
    return ForestModel(trees, params, float(range_m), tuple(data.columns), med)


def predict_error(model: ForestModel, fv, columns: Optional[Sequence[str]] = None) -> float:
    """Predicted error (cm) for one factor vector.

    ``fv`` is a FactorVector or a sequence of values in ``columns`` order; the
    order must match the model's input columns exactly.
    """
    if isinstance(fv, FactorVector):
        cols = FEATURE_COLUMNS
        vals = fv.values()
    else:
        if columns is None:
            raise ValueError("column names are required for raw feature values")
        cols = tuple(columns)
        vals = list(fv)
    if tuple(cols) != tuple(model.input_columns):
        raise ValueError(f"feature order {tuple(cols)} does not match model columns {model.input_columns}")
    if len(vals) != len(cols):
        raise ValueError("value count does not match column count")
    x = np.array([[np.nan if v is None else float(v) for v in vals]])
    return float(model.predict_matrix(x)[0])


def evaluate_model(model: ForestModel, holdout: Dataset) -> Tuple[float, float]:
    """(MAE cm, MSE cm^2) over the holdout rows."""
    if len(holdout) == 0:
        raise ValueError("empty holdout")
    if tuple(holdout.columns) != tuple(model.input_columns):
        raise ValueError("holdout columns do not match the model")
    err = model.predict_matrix(holdout.X) - holdout.y
    return float(np.mean(np.abs(err))), float(np.mean(err * err))


# --- text serialisation ------------------------------------------------------


def _write_node(lines: List[str], tree: Tree, i: int) -> None:
    if tree.feature[i] < 0:
        lines.append(f"leaf {float(tree.value[i])!r} {int(tree.n_samples[i])}")
        return
    lines.append(f"split {int(tree.feature[i])} {float(tree.threshold[i])!r} {float(tree.value[i])!r} "
                 f"{int(tree.n_samples[i])}")
    _write_node(lines, tree, int(tree.left[i]))
    _write_node(lines, tree, int(tree.right[i]))


def dumps_model(model: ForestModel) -> str:
    p = model.params
    lines = [
        f"# {FOREST_FORMAT_VERSION}",
        f"range {float(model.range)!r}",
        f"params n_trees={p.n_trees} max_depth={p.max_depth} min_leaf={p.min_leaf} "
        f"features_per_split={p.features_per_split} seed={p.seed} bootstrap={int(p.bootstrap)}",
        "columns " + ",".join(model.input_columns),
        "medians " + " ".join(repr(float(m)) for m in model.medians),
    ]
    for t, tree in enumerate(model.trees):
        lines.append(f"tree {t} nodes {len(tree)}")
        _write_node(lines, tree, 0)
    return "\n".join(lines) + "\n"


def _opt_int(s: str) -> Optional[int]:
    return None if s == "None" else int(s)


def loads_model(text: str) -> ForestModel:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != f"# {FOREST_FORMAT_VERSION}":
        raise ValueError("not a forest model file (bad version header)")
    pos = 1

    def take(prefix: str) -> str:
        nonlocal pos
        if pos >= len(lines) or not lines[pos].startswith(prefix + " "):
            raise ValueError(f"model file: expected '{prefix}' at record {pos + 1}")
        pos += 1
        return lines[pos - 1][len(prefix) + 1:]

    range_m = float(take("range"))
    kv = dict(item.split("=", 1) for item in take("params").split())
    params = ForestParams(
        n_trees=int(kv["n_trees"]), max_depth=_opt_int(kv["max_depth"]), min_leaf=int(kv["min_leaf"]),
        features_per_split=_opt_int(kv["features_per_split"]), seed=int(kv["seed"]),
        bootstrap=bool(int(kv["bootstrap"])),
    )
    columns = tuple(take("columns").split(","))
    medians = np.array([float(v) for v in take("medians").split()])
    trees = []
    while pos < len(lines):
        head = take("tree").split()
        count = int(head[2])
        body = lines[pos:pos + count]
        pos += count
        nodes: list = []

        def parse(j: int) -> int:
            toks = body[j].split()
            if toks[0] == "leaf":
                nodes.append([-1, 0.0, -1, -1, float(toks[1]), int(toks[2])])
                return j + 1
            node = [int(toks[1]), float(toks[2]), -1, -1, float(toks[3]), int(toks[4])]
            nodes.append(node)
            node[2] = len(nodes)
            j = parse(j + 1)
            node[3] = len(nodes)
            return parse(j)

        try:
            consumed = parse(0)
        except (IndexError, ValueError) as exc:
            raise ValueError(f"model file: malformed tree {head[0]}: {exc}") from None
        if consumed != count:
            raise ValueError("model file: tree node count mismatch")
        trees.append(_tree_from_nodes(nodes))
    medians.setflags(write=False)
    return ForestModel(tuple(trees), params, range_m, columns, medians)


def save_model(path: PathLike, model: ForestModel) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model))


def load_model(path: PathLike) -> ForestModel:
    with open(path) as fh:
        return loads_model(fh.read())
