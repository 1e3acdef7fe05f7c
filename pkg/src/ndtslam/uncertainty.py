"""Transformation uncertainty of a registration and its graph weights.

The total uncertainty of one registration is the sum of a matching term
(mean nearest-neighbour distance after alignment), a time term and an
iteration term. It becomes a block-diagonal information matrix for the
pose graph and a scalar reliability radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import transform_points
from .ndt import PointCloud

U_FLOOR = 1e-6


class UncertaintyError(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintyCoefficients:
    c_t: float = 0.1  # m/s
    c_n: float = 0.01  # m/iteration
    c_p: float = 1.0
    c_r: float = 0.2

    def __post_init__(self):
        vals = (self.c_t, self.c_n, self.c_p, self.c_r)
        if not all(math.isfinite(v) and v > 0 for v in vals):
            raise UncertaintyError("invalid coefficients")


@dataclass(frozen=True)
class UncertaintyBreakdown:
    u_delta: float
    u_time: float
    u_iter: float
    u_total: float


def _points(c) -> np.ndarray:
    return c.points if isinstance(c, PointCloud) else np.asarray(c, dtype=float).reshape(-1, 3)


def matching_degree(reference, input_, converged, workers: int = 1) -> float:
    """Mean distance from each transformed input point to its nearest reference point.

    ``reference`` may be a prebuilt ``cKDTree`` so a sequence builds one tree per scan.
    """
    tree = reference if isinstance(reference, cKDTree) else None
    n_ref = tree.n if tree is not None else len(_points(reference))
    src = _points(input_)
    if n_ref == 0 or len(src) == 0:
        raise UncertaintyError("empty input cloud")
    if tree is None:
        tree = cKDTree(_points(reference))
    moved = transform_points(converged, src)
    dist, _ = tree.query(moved, k=1, workers=workers)
    # fixed-order summation keeps the result reproducible
    return float(math.fsum(dist) / len(dist))


def total_uncertainty(u_delta: float, t_c: float, n_c: int,
                      coeffs: UncertaintyCoefficients | None = None) -> UncertaintyBreakdown:
    coeffs = coeffs or UncertaintyCoefficients()
    if t_c < 0:
        raise UncertaintyError("t_c must be non-negative")
    if n_c < 1:
        raise UncertaintyError("n_c must be at least 1")
    if u_delta < 0:
        raise UncertaintyError("u_delta must be non-negative")
    u_time = coeffs.c_t * t_c
    u_iter = coeffs.c_n * n_c
    return UncertaintyBreakdown(u_delta, u_time, u_iter, u_delta + u_time + u_iter)


def information_matrix(u_total: float, coeffs: UncertaintyCoefficients | None = None) -> np.ndarray:
    """6x6 block-diagonal information: I/(c_p^2 U) for translation, I/(c_r^2 U) for rotation.

    ``u_total`` is clamped to ``U_FLOOR`` so a perfect match cannot give an
    infinite weight.
    """
    coeffs = coeffs or UncertaintyCoefficients()
    if not math.isfinite(u_total) or u_total < 0:
        raise UncertaintyError(f"invalid u_total {u_total!r}")
    u = max(u_total, U_FLOOR)
    omega = np.zeros((6, 6))
    omega[:3, :3] = np.eye(3) / (coeffs.c_p ** 2 * u)
    omega[3:, 3:] = np.eye(3) / (coeffs.c_r ** 2 * u)
    return omega


def information_weights(omega: np.ndarray) -> tuple[float, float]:
    """Scalar diagonal weights (w_p, w_r) of a block-diagonal information matrix."""
    return float(omega[0, 0]), float(omega[3, 3])


def reliability_radius(u_total: float, c_p: float = 1.0) -> float:
    if u_total < 0:
        raise UncertaintyError("u_total must be non-negative")
    return c_p * math.sqrt(u_total)
