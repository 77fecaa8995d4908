"""The numba loops and the numpy fallbacks must agree."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from ndtrange import _jit
from ndtrange.cloud import Pose, PointCloud
from ndtrange.kernels import IMPLEMENTATIONS
from ndtrange.ndt import build_ndt_map, register


def ndt_inputs(seed, n_points=300, want=True):
    rng = np.random.default_rng(seed)
    world = np.concatenate([rng.normal(size=(300, 3)) * rng.uniform(0.1, 0.5) + c
                            for c in rng.uniform(-4, 4, size=(15, 3))])
    m = build_ndt_map(PointCloud(world), 1.0)
    pts = np.ascontiguousarray(world[rng.choice(len(world), n_points, replace=False)] + rng.normal(scale=0.05,
                                                                                                    size=(n_points, 3)))
    pose = Pose(*rng.normal(scale=0.1, size=3), *rng.normal(scale=0.05, size=3))
    rot, d, dd = IMPLEMENTATIONS["rotation_terms"]["numpy"](pose.roll, pose.pitch, pose.yaw)
    mask = m.all_cells_mask.copy()
    mask[::3] = False
    return (pts, rot, pose.translation, d, dd, m.means, m.inverse_covariances, m.lut, m.lut_lo,
            m.cell_size, mask, want)


@pytest.mark.parametrize("seed", range(5))
def test_ndt_eval_agrees(seed):
    args = ndt_inputs(seed)
    s1, g1, h1 = IMPLEMENTATIONS["ndt_eval"]["numba"](*args)
    s2, g2, h2 = IMPLEMENTATIONS["ndt_eval"]["numpy"](*args)
    assert s1 == pytest.approx(s2, rel=1e-12)
    assert np.allclose(g1, g2, rtol=1e-9, atol=1e-9)
    assert np.allclose(h1, h2, rtol=1e-9, atol=1e-7)


def test_ndt_eval_empty_and_score_only():
    args = list(ndt_inputs(0, want=False))
    s1, g1, _ = IMPLEMENTATIONS["ndt_eval"]["numba"](*args)
    s2, g2, _ = IMPLEMENTATIONS["ndt_eval"]["numpy"](*args)
    assert s1 == pytest.approx(s2, rel=1e-12)
    assert not g1.any() and not g2.any()
    args[0] = np.empty((0, 3))
    for impl in IMPLEMENTATIONS["ndt_eval"].values():
        assert impl(*args)[0] == 0.0


@pytest.mark.parametrize("angles", [(0.0, 0.0, 0.0), (0.3, -1.2, 2.9), (-3.1, 1.5, -0.7)])
def test_rotation_terms_agree(angles):
    a = IMPLEMENTATIONS["rotation_terms"]["numba"](*angles)
    b = IMPLEMENTATIONS["rotation_terms"]["numpy"](*angles)
    for x, y in zip(a, b):
        assert np.allclose(x, y, atol=1e-14)


@pytest.mark.parametrize("seed", range(8))
def test_best_split_agrees(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 60))
    x = np.sort(rng.integers(0, 10, n).astype(float))  # ties on purpose
    y = rng.normal(size=n)
    for min_leaf in (1, 2, 5):
        p1, t1, n1 = IMPLEMENTATIONS["best_split"]["numba"](x, y, min_leaf, np.nan)
        p2, t2, n2 = IMPLEMENTATIONS["best_split"]["numpy"](x, y, min_leaf, np.nan)
        assert n1 == n2
        if n1:
            assert p1 == pytest.approx(p2, rel=1e-12)
            assert t1 == t2


def test_best_split_no_admissible_split():
    x = np.ones(6)
    y = np.arange(6.0)
    for impl in IMPLEMENTATIONS["best_split"].values():
        assert impl(x, y, 1, np.nan)[2] == 0
        assert impl(np.arange(3.0), y[:3], 2, np.nan)[2] == 0


SCRIPT = r"""
import json, numpy as np
from ndtrange import _jit, kernels
from ndtrange.cloud import Pose, PointCloud
from ndtrange.ndt import build_ndt_map, register
rng = np.random.default_rng(0)
world = np.concatenate([rng.normal(size=(300, 3)) * 0.3 + c for c in rng.uniform(-4, 4, size=(15, 3))])
m = build_ndt_map(PointCloud(world), 1.0)
res = register(m, PointCloud(world[::5]), Pose(0.3, -0.2, 0.0, 0.0, 0.0, 0.05))
print(json.dumps({"use_numba": _jit.USE_NUMBA, "bound": kernels.ndt_eval.__name__,
                  "pose": list(res.pose.vector), "score": res.final_score}))
"""


def run_script(flag):
    env = dict(os.environ, NDTRANGE_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_env_flag_selects_numpy_path_and_results_match():
    off = run_script("1")
    on = run_script("0")
    assert off["use_numba"] is False and off["bound"] == "_ndt_eval_numpy"
    assert on["use_numba"] is _jit.HAVE_NUMBA
    assert np.allclose(off["pose"], on["pose"], atol=1e-8)
    assert off["score"] == pytest.approx(on["score"], rel=1e-9)


def test_in_process_binding_follows_flag():
    from ndtrange import kernels
    expected = "_ndt_eval_loop" if _jit.USE_NUMBA else "_ndt_eval_numpy"
    assert kernels.ndt_eval.__name__ == expected


def test_register_same_under_both_kernels(monkeypatch):
    from ndtrange import kernels
    rng = np.random.default_rng(1)
    world = np.concatenate([rng.normal(size=(300, 3)) * 0.3 + c for c in rng.uniform(-4, 4, size=(15, 3))])
    m = build_ndt_map(PointCloud(world), 1.0)
    init = Pose(0.3, -0.2, 0.0, 0.0, 0.0, 0.05)
    results = []
    for impl in ("numba", "numpy"):
        monkeypatch.setattr(kernels, "ndt_eval", IMPLEMENTATIONS["ndt_eval"][impl])
        monkeypatch.setattr(kernels, "rotation_terms", IMPLEMENTATIONS["rotation_terms"][impl])
        results.append(register(m, PointCloud(world[::5]), init))
    assert np.allclose(results[0].pose.vector, results[1].pose.vector, atol=1e-8)
