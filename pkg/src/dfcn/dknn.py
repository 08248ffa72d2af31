"""Directionally constrained nearest-neighbor search.

The neighborhood of each query is split into ``n_dirs`` equal angular
sectors on the projected xy plane (sector 0 starts at the +x axis and
sectors run counterclockwise, half-open ``[j*w, (j+1)*w)``). Within each
sector the ``k`` nearest points inside the closed radius are returned,
nearest first, ties broken by ascending point index. Short or empty
sectors are padded with the query's own index.

The result is an ``M x (n_dirs * k)`` int64 table, sector-major.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from dfcn import kernels


class Space(str, enum.Enum):
    PROJECTED_2D = "projected2d"
    CONE_3D = "cone3d"
    UNPARTITIONED = "unpartitioned"


@dataclass(frozen=True)
class SectorQueryConfig:
    n_dirs: int = 8
    k: int = 2
    radius: float = 2.0
    space: Space = Space.PROJECTED_2D

    def __post_init__(self):
        if self.n_dirs < 1 or self.k < 1:
            raise ValueError("n_dirs and k must be >= 1")
        if not self.radius > 0:
            raise ValueError("radius must be > 0")
        object.__setattr__(self, "space", Space(self.space))

    @property
    def width(self) -> int:
        return self.n_dirs * self.k


def sector_index(center, point, n_dirs: int) -> int:
    """Sector id of ``point`` seen from ``center`` (coincident xy maps to 0)."""
    dx = float(point[0]) - float(center[0])
    dy = float(point[1]) - float(center[1])
    if dx == 0.0 and dy == 0.0:
        return 0
    theta = math.atan2(dy, dx)
    if theta < 0.0:
        theta += 2.0 * math.pi
    return min(int(math.floor(theta / ((2.0 * math.pi) / n_dirs))), n_dirs - 1)


def octant_index(center, point) -> int:
    """Octant id: xy quadrant (counterclockwise from +x,+y) plus 4 below the query."""
    dx = float(point[0]) - float(center[0])
    dy = float(point[1]) - float(center[1])
    dz = float(point[2]) - float(center[2])
    if dx >= 0.0:
        q = 0 if dy >= 0.0 else 3
    else:
        q = 1 if dy >= 0.0 else 2
    return q + (4 if dz < 0.0 else 0)


def _prepare(points, queries, min_dim):
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] < min_dim:
        raise ValueError(f"points must be N x >={min_dim}")
    if queries is None:
        q = np.arange(len(pts), dtype=np.int64)
    else:
        q = np.ascontiguousarray(np.asarray(queries, dtype=np.int64).ravel())
        if q.size and (q.min() < 0 or q.max() >= len(pts)):
            raise IndexError("query index out of range")
    return pts, q


def directional_knn(points, queries=None, cfg: SectorQueryConfig = SectorQueryConfig()) -> np.ndarray:
    """Sector neighborhoods for ``queries`` (default: every point).

    Dispatches on ``cfg.space``; the unpartitioned mode returns the
    ``n_dirs * k`` nearest projected neighbors so the table keeps its width.
    """
    if cfg.space is Space.CONE_3D:
        return cone_knn_3d(points, queries, cfg)
    if cfg.space is Space.UNPARTITIONED:
        pts = np.asarray(points, dtype=np.float64)[:, :2]
        return unpartitioned_knn(pts, queries, cfg.width, cfg.radius)
    pts, q = _prepare(points, queries, 2)
    return kernels.sector_knn(pts[:, :2].copy(), q, cfg.n_dirs, cfg.k, cfg.radius, kernels.MODE_SECTOR2D)


def cone_knn_3d(points, queries=None, cfg: SectorQueryConfig = SectorQueryConfig(space=Space.CONE_3D)) -> np.ndarray:
    """Octant neighborhoods with 3D distances (the 3D ablation variant)."""
    if cfg.n_dirs != 8:
        raise ValueError("cone mode partitions space into octants; n_dirs must be 8")
    pts, q = _prepare(points, queries, 3)
    return kernels.sector_knn(pts[:, :3].copy(), q, 8, cfg.k, cfg.radius, kernels.MODE_OCTANT3D)


def unpartitioned_knn(points, queries, k: int, radius: float) -> np.ndarray:
    """Plain k nearest within ``radius`` using every coordinate column, self-filled."""
    if k < 1:
        raise ValueError("k must be >= 1")
    pts, q = _prepare(points, queries, 2)
    return kernels.sector_knn(pts, q, 1, k, radius, kernels.MODE_PLAIN)


def oracle_knn(points, queries=None, cfg: SectorQueryConfig = SectorQueryConfig()) -> np.ndarray:
    """Exhaustive reference for :func:`directional_knn` (pure Python, O(M*n))."""
    pts = np.asarray(points, dtype=np.float64)
    q_list = range(len(pts)) if queries is None else [int(i) for i in np.asarray(queries).ravel()]
    if cfg.space is Space.UNPARTITIONED:
        n_groups, k, dims = 1, cfg.width, 2
    elif cfg.space is Space.CONE_3D:
        if cfg.n_dirs != 8:
            raise ValueError("cone mode requires n_dirs == 8")
        n_groups, k, dims = 8, cfg.k, 3
    else:
        n_groups, k, dims = cfg.n_dirs, cfg.k, 2
    rows = pts.tolist()
    r2 = cfg.radius * cfg.radius
    table = []
    for qi in q_list:
        center = rows[qi]
        groups = [[] for _ in range(n_groups)]
        for j, p in enumerate(rows):
            if j == qi:
                continue
            d2 = 0.0
            for a in range(dims):
                diff = p[a] - center[a]
                d2 = diff * diff if a == 0 else d2 + diff * diff
            if d2 > r2:
                continue
            if cfg.space is Space.UNPARTITIONED:
                s = 0
            elif cfg.space is Space.CONE_3D:
                s = octant_index(center, p)
            else:
                s = sector_index(center, p, n_groups)
            groups[s].append((d2, j))
        row = []
        for g in groups:
            g.sort()
            chosen = [j for _, j in g[:k]]
            row.extend(chosen + [qi] * (k - len(chosen)))
        table.append(row)
    return np.array(table, dtype=np.int64).reshape(len(table), n_groups * k)
