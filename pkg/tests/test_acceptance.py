"""Acceptance criteria, one PASS/FAIL line each at the required tolerances."""

import filecmp
import math
import time

import numpy as np
import pytest
import yaml
from scipy.stats import spearmanr

from _oracles import blob_scene, cart_oracle, grid_optimum, random_fd_config, same_tree, tree_preorder
from conftest import SMALL_CONFIG
from ndtrange.cloud import PointCloud
from ndtrange.factors import FactorConfig, dimension_behavior, extract_vicinity, factor_vector
from ndtrange.forest import Dataset, ForestParams, dumps_model, train_forest
from ndtrange.harness import EvalConfig, config_from_dict, route_summary, run_pipeline, with_overrides
from ndtrange.ndt import build_ndt_map, ndt_gradient_hessian, ndt_score, register
from ndtrange.planner import plan_range
from test_factors import check_invariants, random_map
from test_ndt import fd_gradient, stable_under_fd


def test_criterion_1_registration_matches_grid_optimum(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(12):
        world, scan, truth, initial = blob_scene(seed)
        m = build_ndt_map(PointCloud(world), 2.0)
        p = register(m, PointCloud(scan), initial).pose
        best, _ = grid_optimum(m, scan, truth, p.tz, p.roll, p.pitch)
        worst = max(worst, math.hypot(p.tx - best.tx, p.ty - best.ty))
    elapsed = time.perf_counter() - t0
    ok = worst < 0.02 and elapsed < 300.0
    verdict(1, ok, f"12 scenes, worst distance {100 * worst:.2f} cm vs < 2 cm, {elapsed:.0f} s vs < 300 s")
    assert ok


def test_criterion_2_gradient_matches_finite_differences(verdict):
    rng = np.random.default_rng(2024)
    worst, checked = 0.0, 0
    while checked < 120:
        world, scan, pose = random_fd_config(rng)
        m = build_ndt_map(PointCloud(world), 1.0)
        scan = PointCloud(scan)
        if ndt_score(m, scan, pose) < 1.0 or not stable_under_fd(m, scan, pose):
            continue
        g, _ = ndt_gradient_hessian(m, scan, pose)
        fd = fd_gradient(m, scan, pose)
        worst = max(worst, np.linalg.norm(g - fd) / np.linalg.norm(fd))
        checked += 1
    ok = worst < 1e-4
    verdict(2, ok, f"{checked} configs, worst relative error {worst:.2e} vs < 1e-4")
    assert ok


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    return run_pipeline(EvalConfig(), tmp_path_factory.mktemp("default"))


def test_criterion_3_error_falls_with_range(default_run, verdict):
    s = route_summary(default_run.reports)
    rho = spearmanr(s["range"], s["mean_error_cm"]).statistic
    ok = rho <= -0.7
    verdict(3, ok, f"Spearman {rho:+.3f} vs <= -0.7; errors "
                   + " ".join(f"{e:.2f}" for e in s["mean_error_cm"]) + " cm")
    assert ok


def test_criterion_4_time_rises_with_range(default_run, verdict):
    s = route_summary(default_run.reports)
    t = s["mean_time_ms"]
    rho = spearmanr(s["range"], t).statistic
    strict = bool(np.all(np.diff(t) > 0))
    ok = rho >= 0.9 and strict
    verdict(4, ok, f"Spearman {rho:+.3f} vs >= 0.9, strictly increasing {strict}; times "
                   + " ".join(f"{v:.2f}" for v in t) + " ms")
    assert ok


def test_criterion_5_dynamic_beats_static(default_run, verdict):
    comp = default_run.comparison
    d, s = comp.dynamic, comp.static
    ratio = d["mean_time_ms"] / s["mean_time_ms"]
    pct = d["pct_within_threshold"]
    ok = ratio <= 0.5 and pct >= 80.0
    verdict(5, ok, f"dynamic/static time {ratio:.3f} vs <= 0.5 ({d['mean_time_ms']:.2f} / "
                   f"{s['mean_time_ms']:.2f} ms), {pct:.1f}% within 10 cm vs >= 80%")
    assert ok


def test_scene_heterogeneity(default_run):
    err10 = np.array([r.mean_error_cm[0] for r in default_run.reports])
    err10 = err10[np.isfinite(err10)]
    assert err10.max() >= 2 * err10.min()


def test_criterion_6_planner_on_reference_errors(verdict):
    errors = {10: 15.0, 15: 15.0, 20: 8.6, 25: 6.0, 30: 4.1, 35: 2.6, 40: 1.7, 45: 0.9, 50: 0.3}
    cands = [float(r) for r in range(10, 55, 5)]
    a = plan_range(errors, 10.0, cands)[0]
    b = plan_range(errors, 25.0, cands)[0]
    ok = a == 20.0 and b == 10.0
    verdict(6, ok, f"threshold 10 cm -> {a:g} m (want 20), 25 cm -> {b:g} m (want 10)")
    assert ok


def test_criterion_7_factor_invariants(verdict):
    rng = np.random.default_rng(7)
    violations, n_cells, n_vic = 0, 0, 0
    cfg = FactorConfig()
    for seed in range(5):
        m = random_map(seed)
        for cell in m.cells():
            b = dimension_behavior(cell)
            a = (b.a1d, b.a2d, b.a3d)
            n_cells += 1
            if abs(sum(a) - 1.0) > 1e-9 or not all(0.0 <= v <= 1.0 for v in a):
                violations += 1
        for _ in range(8):
            center = (*rng.uniform(-15, 15, 2), 0.0)
            prev = -1
            for r in (5.0, 10.0, 15.0, 20.0, 25.0):
                fv = factor_vector(m, center, r, cfg)
                n_vic += 1
                violations += len(check_invariants(fv, r, cfg))
                violations += fv.feature_count < prev
                violations += fv.feature_count != len(extract_vicinity(m, center, r).indices)
                prev = fv.feature_count
    ok = violations == 0
    verdict(7, ok, f"{n_cells} cells, {n_vic} vicinities, {violations} violations vs 0")
    assert ok


def test_criterion_8_forest_oracles(verdict):
    rng = np.random.default_rng(8)
    cart_ok = True
    for _ in range(10):
        X = np.round(rng.uniform(0, 10, size=(12, 2)), 2)
        y = np.round(rng.uniform(0, 20, size=12), 3)
        data = Dataset(X, y, np.arange(12), np.full(12, 10.0), ("a", "b"))
        params = ForestParams(n_trees=1, max_depth=None, min_leaf=1, features_per_split=2, bootstrap=False)
        cart_ok &= same_tree(tree_preorder(train_forest(data, params).trees[0]), cart_oracle(X, list(y)))
    X = rng.normal(size=(60, 4))
    const = Dataset(X, np.full(60, 3.7), np.arange(60), np.full(60, 10.0), tuple("abcd"))
    const_ok = bool(np.all(train_forest(const, ForestParams(n_trees=20)).predict_matrix(rng.normal(size=(40, 4)))
                           == 3.7))
    data = Dataset(X, np.abs(X[:, 0]) + 1, np.arange(60), np.full(60, 10.0), tuple("abcd"))
    repro = dumps_model(train_forest(data, ForestParams(n_trees=20, seed=5))) == \
        dumps_model(train_forest(data, ForestParams(n_trees=20, seed=5)))
    ok = cart_ok and const_ok and repro
    verdict(8, ok, f"exhaustive CART equal {cart_ok}, constant exact {const_ok}, bitwise reproducible {repro}")
    assert ok


def test_criterion_9_holdout_beats_mean(default_run, verdict):
    h = default_run.holdout
    ok = h.pooled_mse <= h.pooled_variance
    per = sum(m <= v for m, v in zip(h.mse, h.variance))
    verdict(9, ok, f"pooled holdout MSE {h.pooled_mse:.2f} vs variance {h.pooled_variance:.2f} cm^2; "
                   f"{per}/{len(h.mse)} ranges beat the mean individually")
    assert ok


def non_timing_files(root):
    return sorted(str(p.relative_to(root)) for p in root.rglob("*") if p.is_file() and "timing" not in p.name)


def test_criterion_10_pipeline_reruns_bitwise(tmp_path, verdict):
    cfg = config_from_dict(yaml.safe_load(SMALL_CONFIG))
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    run_pipeline(cfg, a)
    run_pipeline(cfg, b)
    run_pipeline(with_overrides(cfg, timing_mode="parallel"), c)
    names = non_timing_files(a)
    same = names == non_timing_files(b) and all(filecmp.cmp(a / n, b / n, shallow=False) for n in names)
    par = [n for n in names if n != "config.yaml"]
    same_par = all(filecmp.cmp(a / n, c / n, shallow=False) for n in par)
    ok = same and same_par and len(names) > 10
    verdict(10, ok, f"{len(names)} non-timing files identical across reruns {same}, serial vs parallel {same_par}")
    assert ok
