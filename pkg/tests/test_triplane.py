import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from triplane_grasp.geometry import PointCloud, estimate_normals
from triplane_grasp.triplane import (Triplane, load_triplane, node_coordinates, padded_extent, query, query_batch,
                                     save_triplane, synthesize_triplane)


def random_triplane(rng, c=4, h=8, w=8):
    lo = rng.uniform(-1, 0, 3)
    return Triplane(rng.normal(size=(3, c, h, w)), lo, lo + rng.uniform(0.5, 2, 3))


def affine_triplane(coef, c=2, h=8, w=16):
    """Planes holding an affine function of each plane's two coordinates at the nodes."""
    planes = np.zeros((3, c, h, w))
    cols, rows = node_coordinates(w), node_coordinates(h)
    for p in range(3):
        for ch in range(c):
            a, b, k = coef[p, ch]
            planes[p, ch] = a * cols[None, :] + b * rows[:, None] + k
    return Triplane(planes, -np.ones(3), np.ones(3))


def test_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        tri = random_triplane(rng, c=3, h=int(rng.integers(1, 9)), w=int(rng.integers(1, 9)))
        xs = rng.uniform(tri.extent_min - 0.3, tri.extent_max + 0.3, size=(200, 3))
        got = query_batch(tri, xs)
        want = np.array([oracles.triplane_scalar(tri.planes, tri.extent_min, tri.extent_max, x) for x in xs])
        assert np.max(np.abs(got - want)) <= 1e-12


def test_affine_field_reproduced_inside_node_hull():
    rng = np.random.default_rng(1)
    coef = rng.normal(size=(3, 2, 3))
    tri = affine_triplane(coef)
    # stay within the outermost node centres where interpolation is exact
    xs = rng.uniform(-1 + 1 / 8, 1 - 1 / 8, size=(500, 3))
    got = query_batch(tri, xs)
    for p, (a_ax, b_ax) in enumerate(((0, 1), (0, 2), (1, 2))):
        for ch in range(2):
            a, b, k = coef[p, ch]
            want = a * xs[:, a_ax] + b * xs[:, b_ax] + k
            assert np.max(np.abs(got[:, p * 2 + ch] - want)) <= 1e-9


def test_node_values_returned_exactly():
    rng = np.random.default_rng(2)
    tri = Triplane(rng.normal(size=(3, 1, 4, 4)), -np.ones(3), np.ones(3))
    nodes = node_coordinates(4)
    x = np.array([nodes[1], nodes[2], nodes[3]])
    f = tri.query(x)
    assert f[0] == tri.planes[0, 0, 2, 1]  # XY: row from y, column from x
    assert f[1] == tri.planes[1, 0, 3, 1]  # XZ
    assert f[2] == tri.planes[2, 0, 3, 2]  # YZ


def test_clamping_replicates_border():
    rng = np.random.default_rng(3)
    tri = random_triplane(rng)
    inside = np.array([tri.extent_min + 1e-12])
    far = np.array([tri.extent_min - 10.0])
    assert np.array_equal(query_batch(tri, far), query_batch(tri, inside))


def test_empty_and_single_point_shapes():
    tri = random_triplane(np.random.default_rng(4), c=5)
    assert query_batch(tri, np.zeros((0, 3))).shape == (0, 15)
    assert query(tri, np.zeros(3)).shape == (15,)


def test_batch_composition_does_not_change_rows():
    rng = np.random.default_rng(5)
    tri = random_triplane(rng)
    xs = rng.normal(size=(64, 3))
    full = query_batch(tri, xs)
    for i in (0, 17, 63):
        assert np.array_equal(full[i], query_batch(tri, xs[i:i + 1])[0])


def test_invalid_triplanes_rejected():
    with pytest.raises(ValueError):
        Triplane(np.zeros((2, 1, 2, 2)), -np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        Triplane(np.zeros((3, 1, 2, 2)), np.ones(3), np.ones(3))
    with pytest.raises(ValueError):
        Triplane(np.full((3, 1, 2, 2), np.nan), -np.ones(3), np.ones(3))


def test_save_load_roundtrip_float32(tmp_path):
    tri = random_triplane(np.random.default_rng(6), c=3, h=5, w=7)
    save_triplane(tri, tmp_path / "t.json")
    back = load_triplane(tmp_path / "t.json")
    assert np.array_equal(back.planes, tri.planes.astype(np.float32).astype(np.float64))
    assert np.array_equal(back.extent_min, tri.extent_min)
    assert np.array_equal(load_triplane(tmp_path / "t.bin").planes, back.planes)


def test_load_rejects_truncated_payload(tmp_path):
    tri = random_triplane(np.random.default_rng(7))
    save_triplane(tri, tmp_path / "t.json")
    (tmp_path / "t.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-4])
    with pytest.raises(ValueError):
        load_triplane(tmp_path / "t.json")


def test_synthesized_planes_cover_cloud():
    rng = np.random.default_rng(8)
    d = rng.normal(size=(500, 3))
    cloud = estimate_normals(PointCloud(0.05 * d / np.linalg.norm(d, axis=1, keepdims=True)))
    tri = synthesize_triplane(cloud, channels=8, height=16, width=16)
    assert tri.planes.shape == (3, 8, 16, 16)
    lo, hi = padded_extent(cloud.points)
    assert np.all(tri.extent_min == lo) and np.all(tri.extent_max == hi)
    assert np.all(cloud.points >= tri.extent_min) and np.all(cloud.points <= tri.extent_max)
    assert np.isclose(tri.planes[:, 0].max(), 1.0)
    feats = query_batch(tri, cloud.points)
    assert np.all(feats[:, 0] > 0)  # density is positive on the cloud itself


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_outputs_are_convex_combinations_of_nodes(h, w, seed):
    rng = np.random.default_rng(seed)
    tri = Triplane(rng.uniform(-1, 1, size=(3, 2, h, w)), -np.ones(3), np.ones(3))
    f = query_batch(tri, rng.uniform(-2, 2, size=(20, 3))).reshape(20, 3, 2)
    lo = tri.planes.min(axis=(2, 3))
    hi = tri.planes.max(axis=(2, 3))
    assert np.all(f >= lo - 1e-12) and np.all(f <= hi + 1e-12)
