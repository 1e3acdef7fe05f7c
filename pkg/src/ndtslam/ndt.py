"""Normal distributions transform scan registration, with an ICP baseline.

Convention: a registration result ``M`` maps points of the *input* cloud into
the frame of the *reference* cloud, ``x' = R x + t``. For LiDAR odometry the
reference is the previous scan, so ``M`` is the pose of the current sensor
frame expressed in the previous one.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import kernels
from .geometry import Pose6D, transform_points

log = logging.getLogger(__name__)

# Defaults tuned on the simulated street scenes; see README ("Registration defaults").
DEFAULT_CELL_SIZE = 2.5
DEFAULT_FLOOR_RATIO = 0.01

_KEY_BITS = 21
_KEY_OFFSET = 1 << (_KEY_BITS - 1)
_KEY_MASK = (1 << _KEY_BITS) - 1


class RegistrationError(RuntimeError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    timestamp: float = 0.0
    frame_id: int = 0

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=float).reshape(-1, 3))
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        self.points = pts

    def __len__(self):
        return self.points.shape[0]


def read_cloud(path, timestamp: float = 0.0, frame_id: int = 0) -> PointCloud:
    """Read the ASCII cloud format: ``POINTS <n>`` then n lines of ``x y z``."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        parts = header.split()
        if len(parts) != 2 or parts[0] != "POINTS":
            raise ValueError(f"{path}: expected 'POINTS <n>' header, got {header!r}")
        n = int(parts[1])
        try:
            values = np.loadtxt(fh, dtype=float, ndmin=2) if n else np.zeros((0, 3))
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None
    if values.size != 3 * n or (n and values.shape[1] != 3):
        raise ValueError(f"{path}: header declares {n} points, found {values.size / 3:g}")
    return PointCloud(values.reshape(n, 3), timestamp=timestamp, frame_id=frame_id)


def write_cloud(path, cloud: PointCloud, decimals: int = 4) -> None:
    pts = cloud.points
    fmt = f"%.{decimals}f %.{decimals}f %.{decimals}f\n"
    body = (fmt * len(pts)) % tuple(pts.ravel()) if len(pts) else ""
    Path(path).write_text(f"POINTS {len(pts)}\n" + body)


def voxel_keys(points: np.ndarray, size: float) -> np.ndarray:
    return np.floor(points / size).astype(np.int64)


def _encode(keys: np.ndarray) -> np.ndarray:
    k = keys + _KEY_OFFSET
    return (k[:, 0] << (2 * _KEY_BITS)) | (k[:, 1] << _KEY_BITS) | k[:, 2]


def voxel_downsample(points: np.ndarray, size: float) -> np.ndarray:
    """One point (the centroid) per occupied voxel, in voxel-key order."""
    if size <= 0 or len(points) == 0:
        return np.asarray(points, dtype=float)
    codes = _encode(voxel_keys(points, size))
    uniq, inverse = np.unique(codes, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(uniq)).astype(float)
    out = np.empty((len(uniq), 3))
    for a in range(3):
        out[:, a] = np.bincount(inverse, weights=points[:, a], minlength=len(uniq)) / counts
    return out


@dataclass(frozen=True)
class NdtCell:
    mean: np.ndarray
    covariance: np.ndarray
    count: int


@dataclass
class NdtGrid:
    """Per-voxel Gaussians over a reference cloud.

    Cells are stored as parallel arrays sorted by encoded voxel key; ``cells``
    gives the mapping view keyed by integer voxel index.
    """

    cell_size: float
    keys: np.ndarray  # (M, 3) integer voxel indices
    means: np.ndarray  # (M, 3)
    covariances: np.ndarray  # (M, 3, 3)
    inv_covariances: np.ndarray  # (M, 3, 3)
    counts: np.ndarray  # (M,)
    min_points: int = 5
    floor_ratio: float = DEFAULT_FLOOR_RATIO
    codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.codes = _encode(self.keys) if len(self.keys) else np.zeros(0, dtype=np.int64)

    def __len__(self):
        return len(self.counts)

    @property
    def cells(self) -> dict:
        return {
            tuple(int(v) for v in k): NdtCell(m, c, int(n))
            for k, m, c, n in zip(self.keys, self.means, self.covariances, self.counts)
        }

    def lookup(self, points: np.ndarray) -> np.ndarray:
        """Cell row for the voxel containing each point, or -1."""
        if len(self) == 0 or len(points) == 0:
            return np.full(len(points), -1, dtype=np.int64)
        keys = voxel_keys(points, self.cell_size)
        in_range = np.all(np.abs(keys) < _KEY_OFFSET, axis=1)
        codes = _encode(np.where(in_range[:, None], keys, 0))
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, len(self.codes) - 1)
        found = in_range & (self.codes[pos] == codes)
        return np.where(found, pos, -1).astype(np.int64)


def regularize_covariances(covs: np.ndarray, floor_ratio: float = DEFAULT_FLOOR_RATIO, eps: float = 1e-6):
    """Inflate small eigenvalues to ``floor_ratio * lambda_max`` (at least ``eps``).

    Returns (covariances, inverses).
    """
    w, V = np.linalg.eigh(covs)
    floor = np.maximum(floor_ratio * w[:, -1:], eps)
    w = np.maximum(w, floor)
    reg = np.einsum("nij,nj,nkj->nik", V, w, V)
    inv = np.einsum("nij,nj,nkj->nik", V, 1.0 / w, V)
    reg = 0.5 * (reg + np.swapaxes(reg, 1, 2))
    inv = 0.5 * (inv + np.swapaxes(inv, 1, 2))
    return reg, inv


def build_ndt_grid(cloud, cell_size: float = DEFAULT_CELL_SIZE, min_points: int = 5,
                   floor_ratio: float = DEFAULT_FLOOR_RATIO) -> NdtGrid:
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) == 0:
        raise ValueError("empty input cloud")
    keys = voxel_keys(pts, cell_size)
    codes = _encode(keys)
    uniq, first, inverse, counts = np.unique(
        codes, return_index=True, return_inverse=True, return_counts=True)
    keep = counts >= min_points
    m = len(uniq)
    sums = np.zeros((m, 3))
    for a in range(3):
        sums[:, a] = np.bincount(inverse, weights=pts[:, a], minlength=m)
    means = sums / counts[:, None]
    d = pts - means[inverse]
    outer = d[:, :, None] * d[:, None, :]
    covs = np.zeros((m, 9))
    flat = outer.reshape(-1, 9)
    for a in range(9):
        covs[:, a] = np.bincount(inverse, weights=flat[:, a], minlength=m)
    covs = covs.reshape(m, 3, 3) / counts[:, None, None]

    keys_kept = keys[first[keep]]
    means = means[keep]
    covs = covs[keep]
    if len(covs):
        covs, inv = regularize_covariances(covs, floor_ratio)
    else:
        inv = covs.copy()
    return NdtGrid(cell_size, keys_kept, means, covs, inv, counts[keep],
                   min_points=min_points, floor_ratio=floor_ratio)


def _as_vec(pose) -> np.ndarray:
    return pose.as_array() if isinstance(pose, Pose6D) else np.asarray(pose, dtype=float)


def ndt_score(grid: NdtGrid, cloud, pose) -> float:
    """Sum over points of exp(-d^T S^-1 d / 2) against the containing cell."""
    if len(grid) == 0:
        raise ValueError("empty NDT grid")
    pts = cloud.points if isinstance(cloud, PointCloud) else np.ascontiguousarray(cloud, dtype=float)
    v = _as_vec(pose)
    idx = grid.lookup(transform_points(v, pts))
    score, _, _ = kernels.ndt_accumulate(pts, v, idx, grid.means, grid.inv_covariances,
                                         False, False)
    return float(score)


def ndt_objective(grid: NdtGrid, points: np.ndarray, pose, frozen_at=None,
                  want_hess: bool = False):
    """f = -score and its gradient at ``pose``.

    Cell assignment is taken at ``frozen_at`` when given (default: at ``pose``);
    with a frozen assignment f is smooth and the gradient is exact.
    Returns (f, grad, gn_hessian).
    """
    points = np.ascontiguousarray(points, dtype=float)
    v = _as_vec(pose)
    at = v if frozen_at is None else _as_vec(frozen_at)
    idx = grid.lookup(transform_points(at, points))
    score, dscore, hess = kernels.ndt_accumulate(
        points, v, idx, grid.means, grid.inv_covariances, True, want_hess)
    return -float(score), -dscore, hess


@dataclass(frozen=True)
class RegistrationConfig:
    cell_size: float = DEFAULT_CELL_SIZE
    min_points_per_cell: int = 5
    floor_ratio: float = DEFAULT_FLOOR_RATIO
    step_tolerance: float = 1e-4
    max_iterations: int = 30
    downsample: float = 0.5
    max_step: float = 0.5
    # "wall": monotonic wall clock; "work": deterministic count of point evaluations
    clock: str = "work"
    work_unit: float = 1e-7
    icp_max_iterations: int = 50
    icp_step_tolerance: float = 1e-8
    icp_max_distance: float = math.inf


@dataclass
class RegistrationResult:
    transform: Pose6D
    converged: bool
    iterations: int
    elapsed: float
    final_score: float
    matching_degree: float = math.nan
    evaluations: int = 0
    n_points: int = 0
    objective: list = field(default_factory=list)  # f = -score at start and after each accepted step


def _check_clouds(reference, input_):
    for c in (reference, input_):
        n = len(c.points) if isinstance(c, PointCloud) else len(c)
        if n == 0:
            raise ValueError("empty input cloud")


def ndt_register(reference, input_, initial: Pose6D | None = None,
                 cfg: RegistrationConfig | None = None, grid: NdtGrid | None = None
                 ) -> RegistrationResult:
    """BFGS minimization of -score with Armijo backtracking.

    ``grid`` may be passed to reuse a reference grid built earlier; it must
    have been built from ``reference`` with ``cfg.cell_size``.
    """
    cfg = cfg or RegistrationConfig()
    if cfg.max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    _check_clouds(reference, input_)
    if grid is None:
        grid = build_ndt_grid(reference, cfg.cell_size, cfg.min_points_per_cell, cfg.floor_ratio)
    if len(grid) == 0:
        raise RegistrationError("reference cloud produced no NDT cells")
    src = input_.points if isinstance(input_, PointCloud) else np.asarray(input_, dtype=float)
    pts = np.ascontiguousarray(voxel_downsample(src, cfg.downsample))
    x = _as_vec(initial or Pose6D())

    evals = 0
    t0 = time.perf_counter()

    def evaluate(v, hess=False):
        nonlocal evals
        evals += 1
        f, g, H = ndt_objective(grid, pts, v, want_hess=hess)
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            raise RegistrationError("numerical divergence")
        return f, g, H

    f, g, H = evaluate(x, hess=True)
    Binv = _initial_inverse_hessian(H)
    history = [f]
    converged = False
    iterations = 0
    while iterations < cfg.max_iterations:
        iterations += 1
        d = -Binv @ g
        if g @ d >= 0.0:
            Binv = _initial_inverse_hessian(evaluate(x, hess=True)[2])
            d = -Binv @ g
        norm = np.linalg.norm(d)
        if norm > cfg.max_step:
            d *= cfg.max_step / norm
        slope = g @ d
        alpha = 1.0
        accepted = False
        for _ in range(30):
            x_new = x + alpha * d
            f_new, g_new, _ = evaluate(x_new)
            if f_new <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            # no decrease at any trial length: the iterate stays put (zero step)
            converged = True
            break
        s = x_new - x
        y = g_new - g
        x, f, g = x_new, f_new, g_new
        history.append(f)
        if np.linalg.norm(s) < cfg.step_tolerance:
            converged = True
            break
        sy = s @ y
        if sy > 1e-12:
            rho = 1.0 / sy
            I = np.eye(6)
            Binv = (I - rho * np.outer(s, y)) @ Binv @ (I - rho * np.outer(y, s)) \
                + rho * np.outer(s, s)

    if cfg.clock == "work":
        elapsed = evals * len(pts) * cfg.work_unit
    else:
        elapsed = time.perf_counter() - t0
    return RegistrationResult(
        transform=Pose6D.from_array(x),
        converged=bool(converged),
        iterations=iterations,
        elapsed=elapsed,
        final_score=-f,
        evaluations=evals,
        n_points=len(pts),
        objective=history,
    )


def _initial_inverse_hessian(H: np.ndarray) -> np.ndarray:
    # Gauss-Newton part of the NDT Hessian as the starting curvature
    scale = np.trace(H) / 6.0
    if not np.isfinite(scale) or scale <= 1e-9:
        return np.eye(6)
    try:
        L = np.linalg.cholesky(H + 1e-6 * scale * np.eye(6))
    except np.linalg.LinAlgError:
        return np.eye(6) / scale
    Linv = np.linalg.inv(L)
    return Linv.T @ Linv


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares rigid transform (4x4) taking ``src`` onto ``dst``."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    Hm = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(Hm)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = cd - R @ cs
    return T


def icp_register(reference, input_, initial: Pose6D | None = None,
                 cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Point-to-point ICP: nearest neighbours, closed-form update, repeat."""
    cfg = cfg or RegistrationConfig()
    _check_clouds(reference, input_)
    ref = reference.points if isinstance(reference, PointCloud) else np.asarray(reference, float)
    src = input_.points if isinstance(input_, PointCloud) else np.asarray(input_, float)
    src = voxel_downsample(src, cfg.downsample)
    tree = cKDTree(ref)
    T = (initial or Pose6D()).matrix()
    t0 = time.perf_counter()
    converged = False
    iterations = 0
    err = math.nan
    while iterations < cfg.icp_max_iterations:
        iterations += 1
        moved = src @ T[:3, :3].T + T[:3, 3]
        dist, nn = tree.query(moved)
        ok = dist <= cfg.icp_max_distance
        if ok.sum() < 3:
            raise RegistrationError("insufficient correspondences")
        err = float(np.mean(dist[ok] ** 2))
        step = best_fit_transform(moved[ok], ref[nn[ok]])
        T = step @ T
        delta = Pose6D.from_matrix(step).as_array()
        if np.linalg.norm(delta) < cfg.icp_step_tolerance:
            converged = True
            break
    return RegistrationResult(
        transform=Pose6D.from_matrix(T),
        converged=converged,
        iterations=iterations,
        elapsed=time.perf_counter() - t0,
        final_score=err,
        n_points=len(src),
    )
