"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Signatures and outputs match the compiled module exactly, including
tie-breaking and the floating-point operation order of distance sums.
"""
import math

import numpy as np
from scipy.spatial import cKDTree

MODE_SECTOR2D = 0
MODE_OCTANT3D = 1
MODE_PLAIN = 2


def _squared_dist(diff):
    # (dx*dx + dy*dy) + dz*dz ... left to right, same as the C loop
    d2 = diff[:, 0] * diff[:, 0]
    for a in range(1, diff.shape[1]):
        d2 = d2 + diff[:, a] * diff[:, a]
    return d2


def _candidate_pairs(coords, queries, radius):
    if not math.isfinite(radius) or len(coords) <= 64:
        qi = np.repeat(np.arange(len(queries)), len(coords))
        j = np.tile(np.arange(len(coords)), len(queries))
        return qi, j
    tree = cKDTree(coords)
    slack = radius * (1.0 + 1e-9) + 1e-12
    lists = tree.query_ball_point(coords[queries], slack)
    lengths = np.fromiter((len(c) for c in lists), dtype=np.int64, count=len(lists))
    qi = np.repeat(np.arange(len(queries)), lengths)
    j = np.concatenate([np.asarray(c, dtype=np.int64) for c in lists]) if len(qi) else qi
    return qi, j


def sector_knn(pts, queries, n_dirs, k, radius, mode):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    queries = np.ascontiguousarray(queries, dtype=np.int64)
    m = len(queries)
    out = np.repeat(queries[:, None], n_dirs * k, axis=1)
    if m == 0:
        return out

    if mode == MODE_SECTOR2D:
        coords = pts[:, :2]
    elif mode == MODE_OCTANT3D:
        coords = pts[:, :3]
    else:
        coords = pts
    qi, j = _candidate_pairs(coords, queries, radius)
    q = queries[qi]
    keep = j != q
    qi, j, q = qi[keep], j[keep], q[keep]
    d2 = _squared_dist(coords[j] - coords[q])
    keep = d2 <= radius * radius
    qi, j, q, d2 = qi[keep], j[keep], q[keep], d2[keep]

    if mode == MODE_SECTOR2D:
        dx = pts[j, 0] - pts[q, 0]
        dy = pts[j, 1] - pts[q, 1]
        width = (2.0 * math.pi) / n_dirs
        theta = np.array(
            [math.atan2(y, x) for y, x in zip(dy.tolist(), dx.tolist())],
            dtype=np.float64,
        )
        theta = np.where(theta < 0.0, theta + 2.0 * math.pi, theta)
        sector = np.minimum(np.floor(theta / width).astype(np.int64), n_dirs - 1)
        sector[(dx == 0.0) & (dy == 0.0)] = 0
    elif mode == MODE_OCTANT3D:
        dx = pts[j, 0] - pts[q, 0]
        dy = pts[j, 1] - pts[q, 1]
        dz = pts[j, 2] - pts[q, 2]
        quad = np.where(dx >= 0.0, np.where(dy >= 0.0, 0, 3), np.where(dy >= 0.0, 1, 2))
        sector = quad + 4 * (dz < 0.0)
    else:
        sector = np.zeros(len(j), dtype=np.int64)

    order = np.lexsort((j, d2, sector, qi))
    qi, j, sector = qi[order], j[order], sector[order]
    key = qi * n_dirs + sector
    if len(key) == 0:
        return out
    first = np.r_[True, key[1:] != key[:-1]]
    group_start = np.maximum.accumulate(np.where(first, np.arange(len(key)), 0))
    rank = np.arange(len(key)) - group_start
    sel = rank < k
    out[qi[sel], sector[sel] * k + rank[sel]] = j[sel]
    return out


def farthest_point_sampling(pts, m, start):
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    n = len(pts)
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    cur = int(start)
    out[0] = cur
    mind[cur] = -1.0
    for i in range(1, m):
        active = mind >= 0.0
        d2 = _squared_dist(pts - pts[cur])
        mind = np.where(active, np.minimum(mind, d2), mind)
        cur = int(np.argmax(mind))
        out[i] = cur
        mind[cur] = -1.0
    return out


def knn_brute(src, dst, k, chunk=512):
    src = np.ascontiguousarray(src, dtype=np.float64)
    dst = np.ascontiguousarray(dst, dtype=np.float64)
    k = min(k, len(src))
    idx = np.empty((len(dst), k), dtype=np.int64)
    dist = np.empty((len(dst), k), dtype=np.float64)
    for lo in range(0, len(dst), chunk):
        block = dst[lo:lo + chunk]
        diff = src[None, :, :] - block[:, None, :]
        d2 = diff[..., 0] * diff[..., 0]
        for a in range(1, src.shape[1]):
            d2 = d2 + diff[..., a] * diff[..., a]
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx[lo:lo + chunk] = order
        dist[lo:lo + chunk] = np.take_along_axis(d2, order, axis=1)
    return idx, dist


def scatter_add_rows(values, index, n_out):
    out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out
