"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures, same results (up to floating-point summation order).
"""

import numpy as np


def _rot_and_derivs(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    R = np.array([
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx],
        [-sy, cy * sx, cy * cx],
    ])
    Dx = np.array([
        [0.0, cz * sy * cx + sz * sx, -cz * sy * sx + sz * cx],
        [0.0, sz * sy * cx - cz * sx, -sz * sy * sx - cz * cx],
        [0.0, cy * cx, -cy * sx],
    ])
    Dy = np.array([
        [-cz * sy, cz * cy * sx, cz * cy * cx],
        [-sz * sy, sz * cy * sx, sz * cy * cx],
        [-cy, -sy * sx, -sy * cx],
    ])
    Dz = np.array([
        [-sz * cy, -sz * sy * sx - cz * cx, -sz * sy * cx + cz * sx],
        [cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
        [0.0, 0.0, 0.0],
    ])
    return R, Dx, Dy, Dz


def ndt_accumulate(points, pose, idx, means, inv_covs, want_grad=True, want_hess=False):
    """Return (score, d score / d pose, sum_i e_i J_i^T S_i^-1 J_i)."""
    R, Dx, Dy, Dz = _rot_and_derivs(pose[3], pose[4], pose[5])
    grad = np.zeros(6)
    hess = np.zeros((6, 6))
    sel = idx >= 0
    if not np.any(sel):
        return 0.0, grad, hess
    x = points[sel]
    k = idx[sel]
    d = x @ R.T + pose[:3] - means[k]
    S = inv_covs[k]
    sd = np.einsum("nij,nj->ni", S, d)
    e = np.exp(-0.5 * np.einsum("ni,ni->n", d, sd))
    score = float(e.sum())
    if not (want_grad or want_hess):
        return score, grad, hess
    n = x.shape[0]
    J = np.zeros((n, 3, 6))
    J[:, 0, 0] = J[:, 1, 1] = J[:, 2, 2] = 1.0
    J[:, :, 3] = x @ Dx.T
    J[:, :, 4] = x @ Dy.T
    J[:, :, 5] = x @ Dz.T
    if want_grad:
        grad = -np.einsum("n,ni,nib->b", e, sd, J)
    if want_hess:
        SJ = np.einsum("nij,njb->nib", S, J)
        hess = np.einsum("n,nia,nib->ab", e, J, SJ)
    return score, grad, hess


def raycast_boxes(origin, dirs, boxes, ground_z, max_range):
    """Nearest hit per ray among axis-aligned boxes and the plane z = ground_z.

    Returns (ranges, hit) where hit is the box index, -1 for ground and -2
    for no return (range is then +inf).
    """
    origin = np.asarray(origin, dtype=float)
    nr = dirs.shape[0]
    best = np.full(nr, np.inf)
    hit = np.full(nr, -2, dtype=np.int64)

    dz = dirs[:, 2]
    down = dz < -1e-12
    tg = np.full(nr, np.inf)
    tg[down] = (ground_z - origin[2]) / dz[down]
    ok = down & (tg > 0.0) & (tg <= max_range)
    best[ok] = tg[ok]
    hit[ok] = -1

    flat = np.abs(dirs) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(flat, 0.0, 1.0 / np.where(flat, 1.0, dirs))
    for b in range(boxes.shape[0]):
        lo = boxes[b, :3]
        hi = boxes[b, 3:]
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
        tmin = np.minimum(t0, t1)
        tmax = np.maximum(t0, t1)
        outside = (origin < lo) | (origin > hi)
        tmin = np.where(flat, -np.inf, tmin)
        tmax = np.where(flat, np.where(outside, -np.inf, np.inf), tmax)
        tn = tmin.max(axis=1)
        tf = tmax.min(axis=1)
        good = (tn <= tf) & (tf > 0.0) & (tn > 0.0) & (tn < best) & (tn <= max_range)
        best[good] = tn[good]
        hit[good] = b
    return best, hit
