"""Down/up sampling blocks for multiscale point features."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dfcn import autodiff as ad
from dfcn import kernels
from dfcn.dknn import unpartitioned_knn


@dataclass
class LevelState:
    points: np.ndarray
    features: ad.Tensor
    level: int = 0

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.features = ad.as_tensor(self.features)
        if self.features.shape[0] != len(self.points):
            raise ad.ShapeError("points and features are not row-aligned")

    def __len__(self):
        return len(self.points)


def farthest_point_sampling(points, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling on 3D distance, ties to the lowest index."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64)[:, :3])
    n = len(pts)
    if not 1 <= m <= n:
        raise ValueError(f"cannot sample {m} of {n} points")
    if not 0 <= start < n:
        raise IndexError("start index out of range")
    return kernels.farthest_point_sampling(pts, m, start)


def down_block(state: LevelState, m: int, radius: float, nsample: int, params: ad.ParamStore,
               prefix: str, start: int = 0) -> tuple[LevelState, np.ndarray]:
    """FPS to ``m`` centers, group ``nsample`` 3D neighbors, shared affine + relu, max.

    Each neighbor contributes [xyz - center xyz, features]. Returns the new
    level and the selected center indices.
    """
    centers = farthest_point_sampling(state.points, m, start)
    nbr = unpartitioned_knn(state.points, centers, nsample, radius)
    rel = state.points[nbr] - state.points[centers][:, None, :]
    grouped = ad.gather_group(state.features, nbr)
    x = ad.concat_channels(ad.Tensor(rel.astype(grouped.dtype)), grouped)
    h = ad.relu(ad.pointwise_mlp(x, params[f"{prefix}.mlp.weight"], params[f"{prefix}.mlp.bias"]))
    return LevelState(state.points[centers], ad.max_over_group(h), state.level + 1), centers


def interpolation_weights(src_points, dst_points, k: int = 32, power: float = 2.0):
    """Indices and normalized inverse-distance weights of the ``k`` nearest sources.

    A destination that coincides with a source gets weight 1 on it (the
    nearest one by the index tie rule) and 0 elsewhere.
    """
    src = np.ascontiguousarray(np.asarray(src_points, dtype=np.float64)[:, :3])
    dst = np.ascontiguousarray(np.asarray(dst_points, dtype=np.float64)[:, :3])
    if len(src) == 0:
        raise ValueError("interpolation needs at least one source point")
    idx, d2 = kernels.knn_brute(src, dst, min(k, len(src)))
    exact = d2[:, 0] == 0.0
    with np.errstate(divide="ignore"):
        inv = 1.0 / d2 ** (power / 2.0)
    inv[exact] = 0.0
    inv[exact, 0] = 1.0
    w = inv / inv.sum(axis=1, keepdims=True)
    return idx, w


def inverse_distance_interpolate(src: LevelState, dst_points, k: int = 32, power: float = 2.0) -> ad.Tensor:
    idx, w = interpolation_weights(src.points, dst_points, k, power)
    return ad.weighted_sum_rows(src.features, idx, w)


def up_block(src: LevelState, skip: LevelState, k: int, power: float, params: ad.ParamStore,
             prefix: str) -> LevelState:
    """Interpolate ``src`` onto ``skip.points``, concatenate skip features, affine + relu."""
    if skip.level != src.level - 1:
        raise ValueError(f"up_block: skip level {skip.level} is not one below source level {src.level}")
    interp = inverse_distance_interpolate(src, skip.points, k, power)
    x = ad.concat_channels(interp, skip.features)
    h = ad.relu(ad.pointwise_mlp(x, params[f"{prefix}.mlp.weight"], params[f"{prefix}.mlp.bias"]))
    return LevelState(skip.points, h, skip.level)
