# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: NDT per-point accumulation and ray/box casting.

Signatures and results match ``ndtslam._fallback`` exactly; the pure-Python
module is the reference and is used when this extension is not built.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sin, cos, INFINITY, fabs

cnp.import_array()


cdef void _rot_and_derivs(double rx, double ry, double rz, double[:, ::1] R,
                          double[:, ::1] Dx, double[:, ::1] Dy, double[:, ::1] Dz):
    cdef double cx = cos(rx), sx = sin(rx)
    cdef double cy = cos(ry), sy = sin(ry)
    cdef double cz = cos(rz), sz = sin(rz)
    R[0, 0] = cz * cy
    R[0, 1] = cz * sy * sx - sz * cx
    R[0, 2] = cz * sy * cx + sz * sx
    R[1, 0] = sz * cy
    R[1, 1] = sz * sy * sx + cz * cx
    R[1, 2] = sz * sy * cx - cz * sx
    R[2, 0] = -sy
    R[2, 1] = cy * sx
    R[2, 2] = cy * cx
    # d/drx
    Dx[0, 0] = 0.0
    Dx[0, 1] = cz * sy * cx + sz * sx
    Dx[0, 2] = -cz * sy * sx + sz * cx
    Dx[1, 0] = 0.0
    Dx[1, 1] = sz * sy * cx - cz * sx
    Dx[1, 2] = -sz * sy * sx - cz * cx
    Dx[2, 0] = 0.0
    Dx[2, 1] = cy * cx
    Dx[2, 2] = -cy * sx
    # d/dry
    Dy[0, 0] = -cz * sy
    Dy[0, 1] = cz * cy * sx
    Dy[0, 2] = cz * cy * cx
    Dy[1, 0] = -sz * sy
    Dy[1, 1] = sz * cy * sx
    Dy[1, 2] = sz * cy * cx
    Dy[2, 0] = -cy
    Dy[2, 1] = -sy * sx
    Dy[2, 2] = -sy * cx
    # d/drz
    Dz[0, 0] = -sz * cy
    Dz[0, 1] = -sz * sy * sx - cz * cx
    Dz[0, 2] = -sz * sy * cx + cz * sx
    Dz[1, 0] = cz * cy
    Dz[1, 1] = cz * sy * sx - sz * cx
    Dz[1, 2] = cz * sy * cx + sz * sx
    Dz[2, 0] = 0.0
    Dz[2, 1] = 0.0
    Dz[2, 2] = 0.0


def ndt_accumulate(const double[:, ::1] points, const double[::1] pose,
                   const long long[::1] idx, const double[:, ::1] means,
                   const double[:, :, ::1] inv_covs, bint want_grad=True,
                   bint want_hess=False):
    """Return (score, d score / d pose, sum_i e_i J_i^T S_i^-1 J_i)."""
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t i, a, b, c
    cdef long long k
    cdef double score = 0.0, m, e
    cdef double p[3]
    cdef double d[3]
    cdef double sd[3]
    cdef double J[3][6]
    cdef double SJ[3][6]
    cdef double[:, ::1] R = np.empty((3, 3))
    cdef double[:, ::1] Dx = np.empty((3, 3))
    cdef double[:, ::1] Dy = np.empty((3, 3))
    cdef double[:, ::1] Dz = np.empty((3, 3))
    grad_arr = np.zeros(6)
    hess_arr = np.zeros((6, 6))
    cdef double[::1] grad = grad_arr
    cdef double[:, ::1] hess = hess_arr

    _rot_and_derivs(pose[3], pose[4], pose[5], R, Dx, Dy, Dz)

    for a in range(3):
        for b in range(6):
            J[a][b] = 0.0
    J[0][0] = 1.0
    J[1][1] = 1.0
    J[2][2] = 1.0

    with nogil:
        for i in range(n):
            k = idx[i]
            if k < 0:
                continue
            for a in range(3):
                p[a] = (R[a, 0] * points[i, 0] + R[a, 1] * points[i, 1]
                        + R[a, 2] * points[i, 2] + pose[a])
                d[a] = p[a] - means[k, a]
            m = 0.0
            for a in range(3):
                sd[a] = (inv_covs[k, a, 0] * d[0] + inv_covs[k, a, 1] * d[1]
                         + inv_covs[k, a, 2] * d[2])
                m += d[a] * sd[a]
            e = exp(-0.5 * m)
            score += e
            if not want_grad and not want_hess:
                continue
            for a in range(3):
                J[a][3] = Dx[a, 0] * points[i, 0] + Dx[a, 1] * points[i, 1] + Dx[a, 2] * points[i, 2]
                J[a][4] = Dy[a, 0] * points[i, 0] + Dy[a, 1] * points[i, 1] + Dy[a, 2] * points[i, 2]
                J[a][5] = Dz[a, 0] * points[i, 0] + Dz[a, 1] * points[i, 1] + Dz[a, 2] * points[i, 2]
            if want_grad:
                for b in range(6):
                    grad[b] -= e * (sd[0] * J[0][b] + sd[1] * J[1][b] + sd[2] * J[2][b])
            if want_hess:
                for a in range(3):
                    for b in range(6):
                        SJ[a][b] = (inv_covs[k, a, 0] * J[0][b] + inv_covs[k, a, 1] * J[1][b]
                                    + inv_covs[k, a, 2] * J[2][b])
                for b in range(6):
                    for c in range(b, 6):
                        hess[b, c] += e * (J[0][b] * SJ[0][c] + J[1][b] * SJ[1][c]
                                           + J[2][b] * SJ[2][c])
    if want_hess:
        for b in range(6):
            for c in range(b):
                hess[b, c] = hess[c, b]
    return score, grad_arr, hess_arr


def raycast_boxes(const double[::1] origin, const double[:, ::1] dirs,
                  const double[:, ::1] boxes, double ground_z, double max_range):
    """Nearest hit per ray among axis-aligned boxes and the plane z = ground_z.

    Returns (ranges, hit) where hit is the box index, -1 for ground and -2
    for no return (range is then +inf).
    """
    cdef Py_ssize_t nr = dirs.shape[0]
    cdef Py_ssize_t nb = boxes.shape[0]
    cdef Py_ssize_t r, b, ax
    cdef double best, t0, t1, tn, tf, inv, lo, hi, tmp, dz
    cdef int best_id
    cdef bint miss
    ranges_arr = np.empty(nr)
    hit_arr = np.empty(nr, dtype=np.int64)
    cdef double[::1] ranges = ranges_arr
    cdef long long[::1] hit = hit_arr

    with nogil:
        for r in range(nr):
            best = INFINITY
            best_id = -2
            dz = dirs[r, 2]
            if dz < -1e-12:
                tmp = (ground_z - origin[2]) / dz
                if tmp > 0.0 and tmp <= max_range:
                    best = tmp
                    best_id = -1
            for b in range(nb):
                tn = -INFINITY
                tf = INFINITY
                miss = False
                for ax in range(3):
                    lo = boxes[b, ax]
                    hi = boxes[b, ax + 3]
                    if fabs(dirs[r, ax]) < 1e-12:
                        if origin[ax] < lo or origin[ax] > hi:
                            miss = True
                            break
                        continue
                    inv = 1.0 / dirs[r, ax]
                    t0 = (lo - origin[ax]) * inv
                    t1 = (hi - origin[ax]) * inv
                    if t0 > t1:
                        tmp = t0
                        t0 = t1
                        t1 = tmp
                    if t0 > tn:
                        tn = t0
                    if t1 < tf:
                        tf = t1
                    if tn > tf:
                        miss = True
                        break
                if miss or tf <= 0.0 or tn <= 0.0:
                    continue
                if tn < best and tn <= max_range:
                    best = tn
                    best_id = b
            ranges[r] = best
            hit[r] = best_id
    return ranges_arr, hit_arr
