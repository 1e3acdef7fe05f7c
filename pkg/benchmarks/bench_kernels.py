"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times one NDT objective evaluation (score, gradient, Hessian) over a
simulated scan and one full 32-beam ray-cast of a street scene.
"""

import argparse
import timeit

import numpy as np

from ndtslam import _fallback
from ndtslam.geometry import transform_points
from ndtslam.ndt import build_ndt_grid, voxel_downsample
from ndtslam.simulator import ScenarioConfig, generate_scene, scene_boxes, simulate_scan

try:
    from ndtslam import _kernels
except ImportError:
    _kernels = None


def cases():
    scene = generate_scene(ScenarioConfig("sparse", "dense", duration=10.0, seed=0))
    ref = simulate_scan(scene, 1.0, scan_index=10).points
    cur = simulate_scan(scene, 1.1, scan_index=11).points
    grid = build_ndt_grid(ref, 2.5)
    pts = np.ascontiguousarray(voxel_downsample(cur, 0.5))
    pose = np.array([0.8, 0.0, 0.0, 0.0, 0.0, 0.0])
    idx = np.ascontiguousarray(grid.lookup(transform_points(pose, pts)), dtype=np.int64)
    ndt_args = (pts, pose, idx, grid.means, grid.inv_covariances, True, True)

    boxes, _ = scene_boxes(scene, 1.0)
    origin = np.array([8.0, 0.0, 2.0])
    dirs = scene.config.lidar.directions()
    ray_args = (origin, dirs, np.ascontiguousarray(boxes), 0.0, 80.0)
    return {"ndt_accumulate": ndt_args, "raycast_boxes": ray_args}, len(pts), len(dirs), len(boxes)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    work, n_pts, n_rays, n_boxes = cases()
    print(f"ndt_accumulate: {n_pts} points; raycast_boxes: {n_rays} rays x {n_boxes} boxes")
    print(f"{'kernel':16s}{'numpy (ms)':>12s}{'cython (ms)':>13s}{'speedup':>9s}")
    for name, a in work.items():
        py = min(timeit.repeat(lambda: getattr(_fallback, name)(*a), number=1, repeat=args.repeat))
        if _kernels is None:
            print(f"{name:16s}{py * 1e3:12.2f}{'n/a':>13s}{'':>9s}")
            continue
        cy = min(timeit.repeat(lambda: getattr(_kernels, name)(*a), number=1, repeat=args.repeat))
        print(f"{name:16s}{py * 1e3:12.2f}{cy * 1e3:13.2f}{py / cy:8.1f}x")


if __name__ == "__main__":
    main()
