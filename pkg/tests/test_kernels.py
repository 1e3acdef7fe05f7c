import os
import subprocess
import sys

import numpy as np
import pytest

from ndtslam import _fallback, kernels
from ndtslam.ndt import build_ndt_grid
from ndtslam.simulator import LidarModel

compiled = pytest.importorskip("ndtslam._kernels", reason="compiled extension not built")


def _grid_case(rng):
    ref = np.concatenate([rng.normal([0, 0, 0], [4, 1, 0.3], (400, 3)),
                          rng.normal([6, 3, 1], [0.5, 3, 1], (400, 3))])
    grid = build_ndt_grid(ref, 2.0)
    pts = np.ascontiguousarray(ref[::3] + rng.normal(0, 0.1, (267, 3)))
    pose = np.array([0.1, -0.05, 0.02, 0.01, -0.02, 0.05])
    from ndtslam.geometry import transform_points
    idx = np.ascontiguousarray(grid.lookup(transform_points(pose, pts)), dtype=np.int64)
    return pts, pose, idx, grid


@pytest.mark.parametrize("grad,hess", [(False, False), (True, False), (True, True)])
def test_ndt_accumulate_backends_agree(rng, grad, hess):
    pts, pose, idx, grid = _grid_case(rng)
    a = compiled.ndt_accumulate(pts, pose, idx, grid.means, grid.inv_covariances, grad, hess)
    b = _fallback.ndt_accumulate(pts, pose, idx, grid.means, grid.inv_covariances, grad, hess)
    assert a[0] == pytest.approx(b[0], rel=1e-12)
    assert np.allclose(a[1], b[1], rtol=1e-10, atol=1e-12)
    assert np.allclose(a[2], b[2], rtol=1e-10, atol=1e-12)


def test_ndt_accumulate_no_cells(rng):
    pts, pose, _, grid = _grid_case(rng)
    idx = np.full(len(pts), -1, dtype=np.int64)
    for mod in (compiled, _fallback):
        s, g, h = mod.ndt_accumulate(pts, pose, idx, grid.means, grid.inv_covariances, True, True)
        assert s == 0.0 and not g.any() and not h.any()


def test_raycast_backends_agree(rng):
    origin = np.array([0.5, 0.2, 2.0])
    dirs = LidarModel(beams=16, horizontal_resolution=2.0).directions()
    lo = rng.uniform(-30, 30, (40, 3))
    lo[:, 2] = 0.0
    boxes = np.ascontiguousarray(np.hstack([lo, lo + rng.uniform(1, 8, (40, 3))]))
    ra, ha = compiled.raycast_boxes(origin, dirs, boxes, 0.0, 80.0)
    rb, hb = _fallback.raycast_boxes(origin, dirs, boxes, 0.0, 80.0)
    assert np.array_equal(ha, hb)
    fin = np.isfinite(rb)
    assert np.array_equal(np.isfinite(ra), fin)
    assert np.allclose(ra[fin], rb[fin], rtol=0, atol=1e-9)


def test_backend_selection():
    assert kernels.BACKEND == "cython"
    env = dict(os.environ, NDTSLAM_PURE_PYTHON="1")
    r = subprocess.run([sys.executable, "-c", "import ndtslam; print(ndtslam.BACKEND)"],
                       capture_output=True, text=True, env=env, check=True)
    assert r.stdout.strip() == "python"
