"""Compare the numba and numpy implementations of the hot kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--points 1000 10000]

Both implementations are always importable; the env flag only decides which
one the library binds by default, so this script times them side by side.
"""

import argparse
import timeit

import numpy as np

from ndtrange.cloud import Pose, crop_range, voxel_filter
from ndtrange.kernels import IMPLEMENTATIONS
from ndtrange.ndt import build_ndt_map
from ndtrange.scene import default_scene_spec, generate_scene, make_trajectory, simulate_scan


def ndt_args(ndt_map, points, pose, want_derivs=True):
    rot, d, dd = IMPLEMENTATIONS["rotation_terms"]["numpy"](pose.roll, pose.pitch, pose.yaw)
    return (np.ascontiguousarray(points), rot, pose.translation, d, dd, ndt_map.means,
            ndt_map.inverse_covariances, ndt_map.lut, ndt_map.lut_lo, ndt_map.cell_size,
            ndt_map.all_cells_mask, want_derivs)


def best_time(fn, repeat):
    fn()  # compile / warm caches
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--ranges", type=float, nargs="+", default=[10.0, 30.0, 50.0])
    ap.add_argument("--split-rows", type=int, nargs="+", default=[100, 1000, 10000])
    args = ap.parse_args()

    spec = default_scene_spec(0)
    ndt_map = build_ndt_map(generate_scene(spec), 1.0)
    pose = make_trajectory(spec, 10.0).pose(12)
    scan = voxel_filter(simulate_scan(spec, pose, 100.0, 12), 0.5)

    print(f"{'kernel':<28}{'size':>8}{'numba ms':>12}{'numpy ms':>12}{'speedup':>10}")
    for r in args.ranges:
        pts = crop_range(scan, (0, 0, 0), r).points
        for derivs in (False, True):
            a = ndt_args(ndt_map, pts, pose, derivs)
            t = {k: best_time(lambda f=f: f(*a), args.repeat) for k, f in IMPLEMENTATIONS["ndt_eval"].items()}
            name = "ndt_eval (score+derivs)" if derivs else "ndt_eval (score)"
            print(f"{name:<28}{len(pts):>8}{t['numba']:>12.3f}{t['numpy']:>12.3f}{t['numpy'] / t['numba']:>10.1f}")

    rng = np.random.default_rng(0)
    for n in args.split_rows:
        x = np.sort(rng.normal(size=n))
        y = rng.normal(size=n)
        t = {k: best_time(lambda f=f: f(x, y, 2, np.nan), args.repeat) for k, f in IMPLEMENTATIONS["best_split"].items()}
        print(f"{'best_split':<28}{n:>8}{t['numba']:>12.3f}{t['numpy']:>12.3f}{t['numpy'] / t['numba']:>10.1f}")

    t = {k: best_time(lambda f=f: f(0.1, -0.2, 1.3), args.repeat) for k, f in IMPLEMENTATIONS["rotation_terms"].items()}
    print(f"{'rotation_terms':<28}{1:>8}{t['numba']:>12.3f}{t['numpy']:>12.3f}{t['numpy'] / t['numba']:>10.1f}")

    # end-to-end check that both paths agree
    a = ndt_args(ndt_map, crop_range(scan, (0, 0, 0), 30.0).points, pose, True)
    s1, g1, h1 = IMPLEMENTATIONS["ndt_eval"]["numba"](*a)
    s2, g2, h2 = IMPLEMENTATIONS["ndt_eval"]["numpy"](*a)
    print(f"max |numba - numpy|: score {abs(s1 - s2):.2e}, grad {np.abs(g1 - g2).max():.2e}, "
          f"hess {np.abs(h1 - h2).max():.2e}")


if __name__ == "__main__":
    main()
