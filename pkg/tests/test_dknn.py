import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfcn.dknn import (
    SectorQueryConfig,
    Space,
    cone_knn_3d,
    directional_knn,
    octant_index,
    oracle_knn,
    sector_index,
    unpartitioned_knn,
)


@pytest.mark.parametrize("point,expected", [((1, 0.1), 0), ((-1, 0), 4), ((0, 1), 2), ((1, 0), 0),
                                            ((1, -1e-9), 7), ((0, 0), 0)])
def test_sector_index_examples(point, expected):
    assert sector_index((0, 0), point, 8) == expected


def test_single_point_is_self_filled(backend):
    for cfg in (SectorQueryConfig(8, 2, 2.0), SectorQueryConfig(8, 3, 2.0, Space.CONE_3D),
                SectorQueryConfig(4, 1, 5.0, Space.UNPARTITIONED)):
        out = directional_knn(np.zeros((1, 3)), None, cfg)
        assert out.shape == (1, cfg.width)
        assert np.all(out == 0)


def test_bisector_construction(backend):
    angles = (np.arange(8) + 0.5) * (2 * math.pi / 8)
    pts = np.vstack([[0.0, 0.0], np.column_stack([np.cos(angles), np.sin(angles)])])
    out = directional_knn(pts, [0], SectorQueryConfig(8, 1, 2.0))
    np.testing.assert_array_equal(out[0], np.arange(1, 9))


def test_sector_major_distance_ascending_with_padding(backend):
    # three points in sector 0, one in sector 4, K=2
    pts = np.array([[0.0, 0.0], [1.0, 0.2], [0.5, 0.1], [1.5, 0.1], [-1.0, -0.01]])
    out = directional_knn(pts, [0], SectorQueryConfig(8, 2, 2.0))[0].reshape(8, 2)
    np.testing.assert_array_equal(out[0], [2, 1])
    np.testing.assert_array_equal(out[3], [0, 0])
    np.testing.assert_array_equal(out[4], [4, 0])  # (-1, -0.01) is just past 180 degrees
    np.testing.assert_array_equal(out[5:], 0)


def test_radius_is_closed_and_ties_go_to_lower_index(backend):
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0], [2.0, 0.1]])
    out = directional_knn(pts, [0], SectorQueryConfig(4, 2, 2.0))[0].reshape(4, 2)
    assert out[0].tolist() == [1, 0]  # distance exactly R is kept; 4.01 is outside
    assert out[1].tolist() == [2, 0]
    pts = np.array([[0.0, 0.0], [1.0, 0.5], [1.0, 0.5]])
    out = directional_knn(pts, [0], SectorQueryConfig(8, 2, 2.0))[0].reshape(8, 2)
    assert out[0].tolist() == [1, 2]


def test_query_excluded_but_duplicates_kept(backend):
    pts = np.array([[0.0, 0.0], [0.0, 0.0]])
    out = directional_knn(pts, None, SectorQueryConfig(4, 1, 1.0))
    # a coincident point lands in sector 0
    assert out[0].tolist() == [1, 0, 0, 0]
    assert out[1].tolist() == [0, 1, 1, 1]


def test_octant_sign_partition(backend):
    pts = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])
    out = cone_knn_3d(pts, [0], SectorQueryConfig(8, 1, 5.0, Space.CONE_3D))[0]
    assert out.tolist() == [1, 0, 0, 0, 0, 0, 0, 0]
    assert octant_index((0, 0, 0), (1, 1, 1)) == 0
    assert octant_index((0, 0, 0), (-1, 1, -1)) == 5
    with pytest.raises(ValueError):
        cone_knn_3d(pts, None, SectorQueryConfig(4, 1, 5.0, Space.CONE_3D))


def test_unpartitioned_pairs_and_isolated(backend):
    pts = np.array([[0.0, 0, 0], [0.5, 0, 0], [50.0, 0, 0]])
    out = unpartitioned_knn(pts, None, 1, 1.0)
    assert out[:, 0].tolist() == [1, 0, 2]


def test_unpartitioned_uses_3d_distance(backend):
    pts = np.array([[0.0, 0, 0], [0.0, 0, 3.0], [1.0, 0, 0]])
    assert unpartitioned_knn(pts, [0], 1, 2.0)[0, 0] == 2
    assert unpartitioned_knn(pts, [0], 2, 2.0)[0].tolist() == [2, 0]


@pytest.mark.parametrize("space,n_dirs", [(Space.PROJECTED_2D, 8), (Space.PROJECTED_2D, 4),
                                          (Space.CONE_3D, 8), (Space.UNPARTITIONED, 4)])
def test_matches_oracle_on_random_cloud(backend, rng, space, n_dirs):
    pts = np.column_stack([rng.uniform(0, 20, (512, 2)), rng.uniform(0, 5, 512)])
    cfg = SectorQueryConfig(n_dirs, 2, 5.0, space)
    np.testing.assert_array_equal(directional_knn(pts, None, cfg), oracle_knn(pts, None, cfg))


def test_query_subset_matches_full_table(backend, rng):
    pts = rng.uniform(0, 10, (200, 3))
    cfg = SectorQueryConfig(8, 2, 3.0)
    q = rng.choice(200, 30, replace=False)
    np.testing.assert_array_equal(directional_knn(pts, q, cfg), directional_knn(pts, None, cfg)[q])


def test_large_extent_and_radius(backend, rng):
    pts = rng.uniform(-1e6, 1e6, (100, 3))
    for r in (1e-3, 1e7, float("inf")):
        cfg = SectorQueryConfig(8, 1, r)
        np.testing.assert_array_equal(directional_knn(pts, None, cfg), oracle_knn(pts, None, cfg))


def test_config_validation():
    with pytest.raises(ValueError):
        SectorQueryConfig(0, 1, 1.0)
    with pytest.raises(ValueError):
        SectorQueryConfig(8, 1, 0.0)
    with pytest.raises(IndexError):
        directional_knn(np.zeros((3, 3)), [3])


coords = st.floats(-20, 20, allow_nan=False).map(lambda v: round(v, 1))


@settings(max_examples=60, deadline=None)
@given(pts=st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=40),
       n_dirs=st.sampled_from([1, 3, 4, 8]), k=st.integers(1, 4), radius=st.sampled_from([0.5, 2.0, 5.0]),
       cone=st.booleans())
def test_property_oracle_equivalence(pts, n_dirs, k, radius, cone):
    pts = np.array(pts, dtype=np.float64)
    cfg = SectorQueryConfig(8 if cone else n_dirs, k, radius, Space.CONE_3D if cone else Space.PROJECTED_2D)
    out = directional_knn(pts, None, cfg)
    np.testing.assert_array_equal(out, oracle_knn(pts, None, cfg))
    # every non-self entry lies within the radius and in its sector
    for qi in range(len(pts)):
        for slot, j in enumerate(out[qi]):
            if j == qi:
                continue
            s = slot // k
            d = pts[j] - pts[qi]
            if cone:
                assert float(np.sum(d * d)) <= radius * radius
                assert octant_index(pts[qi], pts[j]) == s
            else:
                assert d[0] ** 2 + d[1] ** 2 <= radius * radius
                assert sector_index(pts[qi], pts[j], n_dirs) == s
