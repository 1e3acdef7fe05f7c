"""Rigid 3D transforms in the 6-vector ``[tx ty tz rx ry rz]`` parameterization.

Rotations use intrinsic z-y-x Euler angles (yaw, pitch, roll), i.e.
``R = Rz(rz) @ Ry(ry) @ Rx(rx)``. Every module in the package shares this
convention. Angles are kept in (-pi, pi] and pitch is canonicalized to
[-pi/2, pi/2] so that each rotation has one representation away from
gimbal lock.

The scalar API (:class:`Pose6D`, :func:`compose`, ...) is what callers use;
the ``*_arrays`` helpers are the batched numpy equivalents used by the
optimizers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

TWO_PI = 2.0 * math.pi
GIMBAL_EPS = 1e-6


def wrap_angle(a):
    """Wrap angle(s) to (-pi, pi]. Works on floats and arrays."""
    w = math.pi - np.mod(math.pi - np.asarray(a, dtype=float), TWO_PI)
    if np.ndim(w) == 0:
        return float(w)
    return w


def euler_to_matrix(e: np.ndarray) -> np.ndarray:
    """(..., 3) Euler angles (rx, ry, rz) -> (..., 3, 3) rotation matrices."""
    e = np.asarray(e, dtype=float)
    cx, cy, cz = np.cos(e[..., 0]), np.cos(e[..., 1]), np.cos(e[..., 2])
    sx, sy, sz = np.sin(e[..., 0]), np.sin(e[..., 1]), np.sin(e[..., 2])
    R = np.empty(e.shape[:-1] + (3, 3))
    R[..., 0, 0] = cz * cy
    R[..., 0, 1] = cz * sy * sx - sz * cx
    R[..., 0, 2] = cz * sy * cx + sz * sx
    R[..., 1, 0] = sz * cy
    R[..., 1, 1] = sz * sy * sx + cz * cx
    R[..., 1, 2] = sz * sy * cx - cz * sx
    R[..., 2, 0] = -sy
    R[..., 2, 1] = cy * sx
    R[..., 2, 2] = cy * cx
    return R


def matrix_to_euler(R: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rotation matrices -> (..., 3) Euler angles (rx, ry, rz).

    Pitch comes back in [-pi/2, pi/2]. At gimbal lock roll is set to zero and
    the remaining yaw absorbs the whole rotation about z.
    """
    R = np.asarray(R, dtype=float)
    cy = np.hypot(R[..., 0, 0], R[..., 1, 0])
    ry = np.arctan2(-R[..., 2, 0], cy)
    regular = cy > GIMBAL_EPS
    rx = np.where(regular, np.arctan2(R[..., 2, 1], R[..., 2, 2]), 0.0)
    rz = np.where(
        regular,
        np.arctan2(R[..., 1, 0], R[..., 0, 0]),
        np.arctan2(-R[..., 0, 1], R[..., 1, 1]),
    )
    return np.stack([wrap_angle(rx), ry, wrap_angle(rz)], axis=-1)


def _canonical_angles(rx: float, ry: float, rz: float) -> tuple[float, float, float]:
    ry = wrap_angle(ry)
    if abs(ry) > math.pi / 2:
        # same rotation, pitch folded back into [-pi/2, pi/2]
        rx, ry, rz = rx + math.pi, math.copysign(math.pi, ry) - ry, rz + math.pi
    return wrap_angle(rx), ry, wrap_angle(rz)


@dataclass(frozen=True)
class Pose6D:
    """Rigid transform: translation in meters, z-y-x Euler angles in radians."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self):
        rx, ry, rz = _canonical_angles(self.rx, self.ry, self.rz)
        object.__setattr__(self, "tx", float(self.tx))
        object.__setattr__(self, "ty", float(self.ty))
        object.__setattr__(self, "tz", float(self.tz))
        object.__setattr__(self, "rx", rx)
        object.__setattr__(self, "ry", ry)
        object.__setattr__(self, "rz", rz)

    @classmethod
    def identity(cls) -> "Pose6D":
        return cls()

    @classmethod
    def from_array(cls, v: Iterable[float]) -> "Pose6D":
        v = [float(x) for x in v]
        if len(v) != 6:
            raise ValueError(f"pose vector needs 6 entries, got {len(v)}")
        return cls(*v)

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose6D":
        T = np.asarray(T, dtype=float)
        rx, ry, rz = matrix_to_euler(T[:3, :3])
        return cls(T[0, 3], T[1, 3], T[2, 3], rx, ry, rz)

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz, self.rx, self.ry, self.rz])

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tz])

    @property
    def rotation(self) -> np.ndarray:
        return euler_to_matrix(np.array([self.rx, self.ry, self.rz]))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def __matmul__(self, other: "Pose6D") -> "Pose6D":
        return compose(self, other)


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError("point coordinates must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def compose(a: Pose6D, b: Pose6D) -> Pose6D:
    """Apply ``b`` first, then ``a``."""
    return Pose6D.from_array(compose_arrays(a.as_array(), b.as_array()))


def invert(p: Pose6D) -> Pose6D:
    return Pose6D.from_array(invert_arrays(p.as_array()))


def apply(p: Pose6D, pt) -> Point3:
    """Rotate then translate a point (``R @ pt + t``)."""
    v = pt.as_array() if isinstance(pt, Point3) else np.asarray(pt, dtype=float)
    x, y, z = p.rotation @ v + p.translation
    return Point3(x, y, z)


def transform_points(p, points: np.ndarray) -> np.ndarray:
    """Apply a pose (Pose6D or 6-vector) to an (N, 3) array."""
    v = p.as_array() if isinstance(p, Pose6D) else np.asarray(p, dtype=float)
    R = euler_to_matrix(v[3:])
    return np.asarray(points, dtype=float) @ R.T + v[:3]


def edge_error(xi: Pose6D, xj: Pose6D, zij: Pose6D) -> np.ndarray:
    """Residual of ``zij^-1 * (xi^-1 * xj)``: 3 translation + 3 wrapped angles."""
    return edge_error_arrays(xi.as_array(), xj.as_array(), zij.as_array())


# batched helpers: poses as (..., 6) arrays


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    Ra = euler_to_matrix(a[..., 3:])
    Rb = euler_to_matrix(b[..., 3:])
    t = np.einsum("...ij,...j->...i", Ra, b[..., :3]) + a[..., :3]
    e = matrix_to_euler(Ra @ Rb)
    return np.concatenate([t, e], axis=-1)


def invert_arrays(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    Rt = np.swapaxes(euler_to_matrix(p[..., 3:]), -1, -2)
    t = -np.einsum("...ij,...j->...i", Rt, p[..., :3])
    return np.concatenate([t, matrix_to_euler(Rt)], axis=-1)


def edge_error_arrays(xi: np.ndarray, xj: np.ndarray, zij: np.ndarray) -> np.ndarray:
    rel = compose_arrays(invert_arrays(xi), xj)
    err = compose_arrays(invert_arrays(zij), rel)
    err[..., 3:] = wrap_angle(err[..., 3:])
    return err
