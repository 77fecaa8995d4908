"""Hot numeric kernels.

Each kernel exists twice: an explicit loop compiled with numba and a vectorised
numpy version. The public names (``ndt_eval``, ``best_split``) are bound to one
of the two at import time, see :mod:`ndtrange._jit`.
"""

import numpy as np

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# NDT score / gradient / Hessian
#
# Pose parameters are ordered (tx, ty, tz, roll, pitch, yaw). For a point x the
# transformed point is R x + t and q = R x + t - mu of the cell containing it.
# Per point:  f = exp(-q' C q / 2)
#             g_k = -f q' C J_k
#             H_kl = f [(q' C J_k)(q' C J_l) - J_k' C J_l - q' C d2q_kl]
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _ndt_eval_loop(points, rot, trans, d_rot, dd_rot, means, icovs, lut, lut_lo,
                   cell_size, mask, want_derivs):
    n = points.shape[0]
    nx, ny, nz = lut.shape
    score = 0.0
    grad = np.zeros(6)
    hess = np.zeros((6, 6))
    y = np.empty(3)
    q = np.empty(3)
    cq = np.empty(3)
    jac = np.zeros((3, 6))
    cj = np.empty((3, 6))
    qcj = np.empty(6)
    for a in range(3):
        jac[a, a] = 1.0
    for i in range(n):
        x0 = points[i, 0]
        x1 = points[i, 1]
        x2 = points[i, 2]
        for a in range(3):
            y[a] = rot[a, 0] * x0 + rot[a, 1] * x1 + rot[a, 2] * x2 + trans[a]
        ix = int(np.floor(y[0] / cell_size)) - lut_lo[0]
        iy = int(np.floor(y[1] / cell_size)) - lut_lo[1]
        iz = int(np.floor(y[2] / cell_size)) - lut_lo[2]
        if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
            continue
        c = lut[ix, iy, iz]
        if c < 0 or not mask[c]:
            continue
        for a in range(3):
            q[a] = y[a] - means[c, a]
        for a in range(3):
            cq[a] = icovs[c, a, 0] * q[0] + icovs[c, a, 1] * q[1] + icovs[c, a, 2] * q[2]
        m = q[0] * cq[0] + q[1] * cq[1] + q[2] * cq[2]
        f = np.exp(-0.5 * m)
        score += f
        if not want_derivs:
            continue
        # rotational Jacobian columns
        for k in range(3):
            for a in range(3):
                jac[a, 3 + k] = d_rot[k, a, 0] * x0 + d_rot[k, a, 1] * x1 + d_rot[k, a, 2] * x2
        for k in range(6):
            for a in range(3):
                cj[a, k] = icovs[c, a, 0] * jac[0, k] + icovs[c, a, 1] * jac[1, k] + icovs[c, a, 2] * jac[2, k]
        for k in range(6):
            qcj[k] = q[0] * cj[0, k] + q[1] * cj[1, k] + q[2] * cj[2, k]
            grad[k] -= f * qcj[k]
        for k in range(6):
            for l in range(k, 6):
                jcj = jac[0, k] * cj[0, l] + jac[1, k] * cj[1, l] + jac[2, k] * cj[2, l]
                h = qcj[k] * qcj[l] - jcj
                if k >= 3 and l >= 3:
                    s = 0.0
                    for a in range(3):
                        s += cq[a] * (dd_rot[k - 3, l - 3, a, 0] * x0
                                      + dd_rot[k - 3, l - 3, a, 1] * x1
                                      + dd_rot[k - 3, l - 3, a, 2] * x2)
                    h -= s
                hess[k, l] += f * h
    for k in range(6):
        for l in range(k + 1, 6):
            hess[l, k] = hess[k, l]
    return score, grad, hess


def _ndt_eval_numpy(points, rot, trans, d_rot, dd_rot, means, icovs, lut, lut_lo,
                    cell_size, mask, want_derivs):
    grad = np.zeros(6)
    hess = np.zeros((6, 6))
    if points.shape[0] == 0:
        return 0.0, grad, hess
    y = points @ rot.T + trans
    idx = np.floor(y / cell_size).astype(np.int64) - lut_lo
    inside = np.all((idx >= 0) & (idx < np.array(lut.shape)), axis=1)
    cid = np.full(points.shape[0], -1, dtype=np.int64)
    cid[inside] = lut[idx[inside, 0], idx[inside, 1], idx[inside, 2]]
    keep = cid >= 0
    keep[keep] = mask[cid[keep]]
    if not keep.any():
        return 0.0, grad, hess
    c = cid[keep]
    x = points[keep]
    q = y[keep] - means[c]
    C = icovs[c]
    cq = np.einsum("nab,nb->na", C, q)
    f = np.exp(-0.5 * np.einsum("na,na->n", q, cq))
    score = float(f.sum())
    if not want_derivs:
        return score, grad, hess
    n = x.shape[0]
    jac = np.zeros((n, 3, 6))
    jac[:, 0, 0] = jac[:, 1, 1] = jac[:, 2, 2] = 1.0
    jac[:, :, 3:] = np.einsum("kab,nb->nak", d_rot, x)
    qcj = np.einsum("na,nak->nk", cq, jac)
    grad = -(f[:, None] * qcj).sum(axis=0)
    jcj = np.einsum("nak,nab,nbl->nkl", jac, C, jac)
    second = np.einsum("na,klab,nb->nkl", cq, dd_rot, x)
    h = np.einsum("nk,nl->nkl", qcj, qcj) - jcj
    h[:, 3:, 3:] -= second
    hess = np.einsum("n,nkl->kl", f, h)
    hess = 0.5 * (hess + hess.T)
    return score, grad, hess


# ---------------------------------------------------------------------------
# Rotation R = Rz(yaw) Ry(pitch) Rx(roll) and its first/second derivatives
# ---------------------------------------------------------------------------


@njit(cache=True, nogil=True)
def _rotation_terms_loop(roll, pitch, yaw):
    """(R, d, dd) with d[k] = dR/da_k and dd[k, l] = d2R/(da_k da_l), a = (roll, pitch, yaw)."""
    # f[axis, order] is the order-th derivative of the elementary rotation about axis
    f = np.zeros((3, 3, 3, 3))
    ang = (roll, pitch, yaw)
    for ax in range(3):
        c = np.cos(ang[ax])
        s = np.sin(ang[ax])
        i = (ax + 1) % 3
        j = (ax + 2) % 3
        # derivative cycle of (cos, sin): (c, s) -> (-s, c) -> (-c, -s)
        for o in range(3):
            if o == 0:
                cc, ss = c, s
                f[ax, o, ax, ax] = 1.0
            elif o == 1:
                cc, ss = -s, c
            else:
                cc, ss = -c, -s
            f[ax, o, i, i] = cc
            f[ax, o, j, j] = cc
            f[ax, o, i, j] = -ss
            f[ax, o, j, i] = ss
    rot = f[2, 0] @ f[1, 0] @ f[0, 0]
    d = np.empty((3, 3, 3))
    dd = np.empty((3, 3, 3, 3))
    o = np.zeros(3, dtype=np.int64)
    for k in range(3):
        o[:] = 0
        o[k] = 1
        d[k] = f[2, o[2]] @ f[1, o[1]] @ f[0, o[0]]
        for l in range(3):
            o[l] += 1
            dd[k, l] = f[2, o[2]] @ f[1, o[1]] @ f[0, o[0]]
            o[l] -= 1
    return rot, d, dd


def _rotation_terms_numpy(roll, pitch, yaw):
    from .cloud import Pose

    pose = Pose(0.0, 0.0, 0.0, roll, pitch, yaw)
    d, dd = pose.rotation_derivatives()
    return pose.rotation(), d, dd


# ---------------------------------------------------------------------------
# CART split search on one feature
# ---------------------------------------------------------------------------


# Split scores that differ by less than TIE_TOL * sum(y^2) are rounding noise,
# not real differences; among those the first candidate wins.
TIE_TOL = 1e-12


@njit(cache=True, nogil=True)
def _best_split_loop(x_sorted, y_sorted, min_leaf, cut):
    """Return (best proxy, threshold, n_left); proxy = S_L^2/n_L + S_R^2/n_R.

    Maximising the proxy minimises the summed squared error of the children.
    The chosen split is the first admissible one whose proxy reaches ``cut``;
    pass NaN for ``cut`` to use the best proxy minus the tie tolerance.
    n_left = 0 means no admissible split.
    """
    n = x_sorted.shape[0]
    total = 0.0
    sumsq = 0.0
    for i in range(n):
        total += y_sorted[i]
        sumsq += y_sorted[i] * y_sorted[i]
    best = -np.inf
    left = 0.0
    for i in range(1, n):
        left += y_sorted[i - 1]
        if i < min_leaf or n - i < min_leaf or x_sorted[i - 1] == x_sorted[i]:
            continue
        right = total - left
        proxy = left * left / i + right * right / (n - i)
        if proxy > best:
            best = proxy
    if best == -np.inf:
        return best, 0.0, 0
    if np.isnan(cut):
        cut = best - TIE_TOL * sumsq
    left = 0.0
    for i in range(1, n):
        left += y_sorted[i - 1]
        if i < min_leaf or n - i < min_leaf or x_sorted[i - 1] == x_sorted[i]:
            continue
        right = total - left
        if left * left / i + right * right / (n - i) >= cut:
            return best, 0.5 * (x_sorted[i - 1] + x_sorted[i]), i
    return best, 0.0, 0


def _best_split_numpy(x_sorted, y_sorted, min_leaf, cut):
    n = x_sorted.shape[0]
    if n < 2:
        return -np.inf, 0.0, 0
    csum = np.cumsum(y_sorted)
    total = csum[-1]
    i = np.arange(1, n)
    left = csum[:-1]
    ok = (i >= min_leaf) & (n - i >= min_leaf) & (x_sorted[:-1] != x_sorted[1:])
    if not ok.any():
        return -np.inf, 0.0, 0
    right = total - left
    proxy = np.where(ok, left * left / i + right * right / np.maximum(n - i, 1), -np.inf)
    best = float(proxy.max())
    if np.isnan(cut):
        cut = best - TIE_TOL * float(np.dot(y_sorted, y_sorted))
    hit = np.nonzero(proxy >= cut)[0]
    if len(hit) == 0:
        return best, 0.0, 0
    j = int(hit[0])
    return best, float(0.5 * (x_sorted[j] + x_sorted[j + 1])), int(i[j])


if USE_NUMBA:
    ndt_eval = _ndt_eval_loop
    rotation_terms = _rotation_terms_loop
    best_split = _best_split_loop
else:
    ndt_eval = _ndt_eval_numpy
    rotation_terms = _rotation_terms_numpy
    best_split = _best_split_numpy

IMPLEMENTATIONS = {
    "ndt_eval": {"numba": _ndt_eval_loop, "numpy": _ndt_eval_numpy},
    "rotation_terms": {"numba": _rotation_terms_loop, "numpy": _rotation_terms_numpy},
    "best_split": {"numba": _best_split_loop, "numpy": _best_split_numpy},
}
