# cython: language_level=3
"""Compiled hot loops: sector/octant neighbor search, FPS, brute kNN, scatter-add.

Every routine here has a numpy twin in ``_fallback`` with the same
signature and bit-identical output.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport atan2, floor, INFINITY, M_PI, isfinite
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.int64_t idx_t

cdef enum:
    MODE_SECTOR2D = 0
    MODE_OCTANT3D = 1
    MODE_PLAIN = 2


cdef inline bint _less(double da, idx_t ia, double db, idx_t ib) noexcept nogil:
    return da < db or (da == db and ia < ib)


cdef inline void _insert(double *bd, idx_t *bi, int *cnt, int k,
                         double d2, idx_t j) noexcept nogil:
    # bd/bi hold cnt[0] entries sorted by (distance, index)
    cdef int c = cnt[0]
    cdef int pos
    if c == k and not _less(d2, j, bd[k - 1], bi[k - 1]):
        return
    pos = c if c < k else k - 1
    while pos > 0 and _less(d2, j, bd[pos - 1], bi[pos - 1]):
        bd[pos] = bd[pos - 1]
        bi[pos] = bi[pos - 1]
        pos -= 1
    bd[pos] = d2
    bi[pos] = j
    if c < k:
        cnt[0] = c + 1


cdef inline int _sector(double dx, double dy, int n_dirs, double width) noexcept nogil:
    cdef double theta
    cdef int s
    if dx == 0.0 and dy == 0.0:
        return 0
    theta = atan2(dy, dx)
    if theta < 0.0:
        theta = theta + 2.0 * M_PI
    s = <int>floor(theta / width)
    if s >= n_dirs:
        s = n_dirs - 1
    return s


cdef inline int _octant(double dx, double dy, double dz) noexcept nogil:
    cdef int q
    if dx >= 0.0:
        q = 0 if dy >= 0.0 else 3
    else:
        q = 1 if dy >= 0.0 else 2
    if dz < 0.0:
        q += 4
    return q


def sector_knn(double[:, ::1] pts, idx_t[::1] queries, int n_dirs, int k,
               double radius, int mode):
    """K nearest per angular sector (or octant, or unpartitioned) within radius.

    Candidates come from a uniform grid hash over xy with cell edge >= radius,
    so only the 3x3 surrounding cells are visited.
    """
    cdef Py_ssize_t n = pts.shape[0]
    cdef Py_ssize_t dim = pts.shape[1]
    cdef Py_ssize_t m = queries.shape[0]
    cdef int groups = n_dirs
    cdef int width_k = n_dirs * k
    out_arr = np.empty((m, width_k), dtype=np.int64)
    cdef idx_t[:, ::1] out = out_arr
    if m == 0:
        return out_arr

    cdef double r2 = radius * radius
    cdef double width = (2.0 * M_PI) / n_dirs
    cdef double minx = INFINITY, miny = INFINITY, maxx = -INFINITY, maxy = -INFINITY
    cdef Py_ssize_t i, j, t, a
    for i in range(n):
        if pts[i, 0] < minx: minx = pts[i, 0]
        if pts[i, 0] > maxx: maxx = pts[i, 0]
        if pts[i, 1] < miny: miny = pts[i, 1]
        if pts[i, 1] > maxy: maxy = pts[i, 1]

    cdef double cell = radius
    cdef long long nx, ny
    cdef long long limit = 4 * n + 64
    cdef double fx, fy
    if not isfinite(cell) or cell <= 0.0:
        nx = 1
        ny = 1
        cell = INFINITY
    else:
        while True:
            fx = floor((maxx - minx) / cell) + 1.0
            fy = floor((maxy - miny) / cell) + 1.0
            if fx * fy <= <double>limit:
                break
            cell *= 2.0
        nx = <long long>fx
        ny = <long long>fy

    cdef Py_ssize_t ncell = nx * ny
    cell_of_arr = np.empty(n, dtype=np.int64)
    start_arr = np.zeros(ncell + 1, dtype=np.int64)
    order_arr = np.empty(n, dtype=np.int64)
    cdef idx_t[::1] cell_of = cell_of_arr
    cdef idx_t[::1] start = start_arr
    cdef idx_t[::1] order = order_arr
    cdef long long cx, cy
    for i in range(n):
        if nx == 1 and ny == 1:
            cx = 0
            cy = 0
        else:
            cx = <long long>floor((pts[i, 0] - minx) / cell)
            cy = <long long>floor((pts[i, 1] - miny) / cell)
            if cx >= nx: cx = nx - 1
            if cy >= ny: cy = ny - 1
        cell_of[i] = cx * ny + cy
        start[cell_of[i] + 1] += 1
    for t in range(ncell):
        start[t + 1] += start[t]
    fill_arr = start_arr[:-1].copy()
    cdef idx_t[::1] fill = fill_arr
    for i in range(n):
        order[fill[cell_of[i]]] = i
        fill[cell_of[i]] += 1

    cdef double *bd = <double *>malloc(width_k * sizeof(double))
    cdef idx_t *bi = <idx_t *>malloc(width_k * sizeof(idx_t))
    cdef int *cnt = <int *>malloc(groups * sizeof(int))
    cdef idx_t q, c
    cdef long long qx, qy, gx, gy
    cdef double dx, dy, dz, d2, diff
    cdef int s, g
    try:
        with nogil:
            for t in range(m):
                q = queries[t]
                for g in range(groups):
                    cnt[g] = 0
                c = cell_of[q]
                qx = c // ny
                qy = c - qx * ny
                for gx in range(qx - 1, qx + 2):
                    if gx < 0 or gx >= nx:
                        continue
                    for gy in range(qy - 1, qy + 2):
                        if gy < 0 or gy >= ny:
                            continue
                        c = gx * ny + gy
                        for a in range(start[c], start[c + 1]):
                            j = order[a]
                            if j == q:
                                continue
                            dx = pts[j, 0] - pts[q, 0]
                            dy = pts[j, 1] - pts[q, 1]
                            if mode == MODE_SECTOR2D:
                                d2 = dx * dx + dy * dy
                                if d2 > r2:
                                    continue
                                s = _sector(dx, dy, n_dirs, width)
                            elif mode == MODE_OCTANT3D:
                                dz = pts[j, 2] - pts[q, 2]
                                d2 = dx * dx + dy * dy
                                d2 = d2 + dz * dz
                                if d2 > r2:
                                    continue
                                s = _octant(dx, dy, dz)
                            else:
                                d2 = dx * dx + dy * dy
                                for i in range(2, dim):
                                    diff = pts[j, i] - pts[q, i]
                                    d2 = d2 + diff * diff
                                if d2 > r2:
                                    continue
                                s = 0
                            _insert(bd + s * k, bi + s * k, cnt + s, k, d2, j)
                for g in range(groups):
                    for s in range(k):
                        if s < cnt[g]:
                            out[t, g * k + s] = bi[g * k + s]
                        else:
                            out[t, g * k + s] = q
    finally:
        free(bd)
        free(bi)
        free(cnt)
    return out_arr


def farthest_point_sampling(double[:, ::1] pts, Py_ssize_t m, Py_ssize_t start):
    """Greedy FPS on squared 3D distance; ties go to the lowest index."""
    cdef Py_ssize_t n = pts.shape[0]
    out_arr = np.empty(m, dtype=np.int64)
    cdef idx_t[::1] out = out_arr
    mind_arr = np.full(n, INFINITY, dtype=np.float64)
    cdef double[::1] mind = mind_arr
    cdef Py_ssize_t i, j, cur = start, best
    cdef double dx, dy, dz, d2, bestd
    with nogil:
        out[0] = cur
        mind[cur] = -1.0
        for i in range(1, m):
            best = -1
            bestd = -1.0
            for j in range(n):
                if mind[j] < 0.0:
                    continue
                dx = pts[j, 0] - pts[cur, 0]
                dy = pts[j, 1] - pts[cur, 1]
                dz = pts[j, 2] - pts[cur, 2]
                d2 = dx * dx + dy * dy
                d2 = d2 + dz * dz
                if d2 < mind[j]:
                    mind[j] = d2
                if mind[j] > bestd:
                    bestd = mind[j]
                    best = j
            cur = best
            out[i] = cur
            mind[cur] = -1.0
    return out_arr


def knn_brute(double[:, ::1] src, double[:, ::1] dst, int k):
    """Exhaustive k nearest sources per destination (squared distances returned)."""
    cdef Py_ssize_t n = src.shape[0]
    cdef Py_ssize_t m = dst.shape[0]
    cdef Py_ssize_t dim = src.shape[1]
    if k > n:
        k = <int>n
    idx_arr = np.empty((m, k), dtype=np.int64)
    dist_arr = np.empty((m, k), dtype=np.float64)
    cdef idx_t[:, ::1] idx = idx_arr
    cdef double[:, ::1] dist = dist_arr
    cdef double *bd = <double *>malloc(k * sizeof(double))
    cdef idx_t *bi = <idx_t *>malloc(k * sizeof(idx_t))
    cdef int cnt, s
    cdef Py_ssize_t t, j, a
    cdef double d2, diff
    try:
        with nogil:
            for t in range(m):
                cnt = 0
                for j in range(n):
                    diff = src[j, 0] - dst[t, 0]
                    d2 = diff * diff
                    for a in range(1, dim):
                        diff = src[j, a] - dst[t, a]
                        d2 = d2 + diff * diff
                    _insert(bd, bi, &cnt, k, d2, j)
                for s in range(k):
                    idx[t, s] = bi[s]
                    dist[t, s] = bd[s]
    finally:
        free(bd)
        free(bi)
    return idx_arr, dist_arr


ctypedef fused real_t:
    float
    double


def scatter_add_rows(real_t[:, ::1] values, idx_t[::1] index, Py_ssize_t n_out):
    """out[index[r]] += values[r] for every row r."""
    cdef Py_ssize_t r, a
    cdef Py_ssize_t rows = values.shape[0]
    cdef Py_ssize_t d = values.shape[1]
    dtype = np.float64 if real_t is double else np.float32
    out_arr = np.zeros((n_out, d), dtype=dtype)
    cdef real_t[:, ::1] out = out_arr
    cdef idx_t dst
    with nogil:
        for r in range(rows):
            dst = index[r]
            for a in range(d):
                out[dst, a] += values[r, a]
    return out_arr
