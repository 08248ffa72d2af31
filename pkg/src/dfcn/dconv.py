"""Directionally constrained point convolution (D-Conv).

One block is: directional gather -> per-sector 1xK convolution -> relu ->
cross-sector 1xN_d convolution -> relu. A module stacks ``blocks`` of
them on the same neighborhood table and adds the module input back at the
end (through a learned linear projection when channel counts differ).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dfcn import autodiff as ad
from dfcn.dknn import SectorQueryConfig, Space, directional_knn


@dataclass(frozen=True)
class DConvSpec:
    n_dirs: int = 8
    k: int = 2
    radius: float = 2.0
    d_in: int = 2
    d_out: int = 32
    blocks: int = 2
    space: Space = Space.PROJECTED_2D

    def __post_init__(self):
        if min(self.n_dirs, self.k, self.d_in, self.d_out, self.blocks) < 1:
            raise ValueError("all D-Conv counts must be >= 1")

    @property
    def query(self) -> SectorQueryConfig:
        return SectorQueryConfig(self.n_dirs, self.k, self.radius, self.space)


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_dconv_params(store: ad.ParamStore, prefix: str, spec: DConvSpec, rng: np.random.Generator):
    """Register ``{prefix}.block{b}.{convK|convNd}.{weight|bias}`` and the residual projection."""
    d_in = spec.d_in
    for b in range(spec.blocks):
        store.add(f"{prefix}.block{b}.convK.weight",
                  glorot(rng, (spec.d_out, spec.k, d_in), spec.k * d_in, spec.k * spec.d_out))
        store.add(f"{prefix}.block{b}.convK.bias", np.zeros(spec.d_out))
        store.add(f"{prefix}.block{b}.convNd.weight",
                  glorot(rng, (spec.d_out, spec.n_dirs, spec.d_out), spec.n_dirs * spec.d_out, spec.n_dirs * spec.d_out))
        store.add(f"{prefix}.block{b}.convNd.bias", np.zeros(spec.d_out))
        d_in = spec.d_out
    if spec.d_in != spec.d_out:
        store.add(f"{prefix}.residual.weight", np.zeros((spec.d_out, spec.d_in)))


def neighborhoods(points, spec: DConvSpec) -> np.ndarray:
    return directional_knn(points, None, spec.query)


def dconv_forward(points, features, spec: DConvSpec, params: ad.ParamStore, prefix: str,
                  neighborhood: np.ndarray | None = None) -> ad.Tensor:
    """Apply the module to every point; returns an N x d_out tensor.

    ``neighborhood`` may be passed in to reuse a table computed earlier
    (it depends only on the geometry).
    """
    features = ad.as_tensor(features)
    n = len(points)
    if features.shape != (n, spec.d_in):
        raise ad.ShapeError(f"{prefix}: features {features.shape} do not match {n} x {spec.d_in}")
    nbr = neighborhoods(points, spec) if neighborhood is None else neighborhood
    x = features
    for b in range(spec.blocks):
        g = ad.gather_group(x, nbr)
        h = ad.relu(ad.conv_1xK(g, params[f"{prefix}.block{b}.convK.weight"], params[f"{prefix}.block{b}.convK.bias"]))
        o = ad.conv_1xNd(h, params[f"{prefix}.block{b}.convNd.weight"], params[f"{prefix}.block{b}.convNd.bias"])
        x = ad.relu(ad.reshape(o, (n, spec.d_out)))
    if spec.d_in == spec.d_out:
        skip = features
    else:
        skip = ad.pointwise_mlp(features, params[f"{prefix}.residual.weight"])
    return ad.add_elementwise(x, skip)


def dconv_locality_probe(points, features, spec: DConvSpec, params: ad.ParamStore, prefix: str,
                         perturb_index: int, delta: float = 1.0) -> set[int]:
    """Rows of the output that change when one input feature row is perturbed."""
    features = np.asarray(features, dtype=np.float64)
    if not 0 <= perturb_index < len(features):
        raise IndexError("perturb_index out of range")
    nbr = neighborhoods(points, spec)
    base = dconv_forward(points, features, spec, params, prefix, nbr).data
    bumped = features.copy()
    bumped[perturb_index] += delta
    moved = dconv_forward(points, bumped, spec, params, prefix, nbr).data
    return set(np.flatnonzero(np.any(moved != base, axis=1)).tolist())
