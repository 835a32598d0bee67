import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import height_map_brute

from rolls.geometry import PointCloud
from rolls.labels import (
    OccupancyQuerySet,
    build_height_map,
    export_height_map_pgm,
    generate_occupancy_queries,
    height_map_for_grid,
    load_height_map,
    query_height_labels,
    save_height_map,
)
from rolls.pgm import read_pgm
from rolls.tpv import VoxelGridSpec


def test_axis_aligned_queries():
    q = generate_occupancy_queries(PointCloud([[2.0, 0, 0]]), 0.2, 1, law="fixed")
    np.testing.assert_allclose(q.positives, [[2.2, 0, 0]], atol=1e-15)
    np.testing.assert_allclose(q.negatives, [[1.8, 0, 0]], atol=1e-15)
    q = generate_occupancy_queries(PointCloud([[0, 3.0, 0]]), 0.5)
    np.testing.assert_allclose(q.positives, [[0, 3.5, 0]], atol=1e-15)


def test_query_geometry_seed_42(rng):
    c = rng.normal(size=3)
    pts = c + rng.uniform(-30, 30, (1000, 3))
    q = generate_occupancy_queries(PointCloud(pts, c), 0.2, 3, rng_seed=42)
    d = np.linalg.norm(pts - c, axis=1)
    u = (pts - c) / d[:, None]
    off = q.positives - pts
    assert np.abs(np.linalg.norm(off, axis=1) - 0.2).max() < 1e-9
    assert np.all((off * u).sum(1) > 0)
    neg = q.negatives.reshape(-1, 3, 3)
    along = ((neg - c) * u[:, None, :]).sum(-1)
    assert np.all(along > 0) and np.all(along < d[:, None])
    assert np.abs(np.cross(neg - c, u[:, None, :])).max() < 1e-9
    # first negative is a near-surface one
    assert np.all(q.negative_radius.reshape(-1, 3)[:, 0] <= 0.2)


def test_queries_deterministic_and_seed_dependent(rng):
    cloud = PointCloud(rng.uniform(1, 10, (200, 3)))
    a = generate_occupancy_queries(cloud, rng_seed=7)
    b = generate_occupancy_queries(cloud, rng_seed=7)
    c = generate_occupancy_queries(cloud, rng_seed=8)
    np.testing.assert_array_equal(a.negatives, b.negatives)
    assert not np.array_equal(a.negatives, c.negatives)


def test_close_and_degenerate_points_skipped():
    cloud = PointCloud([[0, 0, 0], [0.1, 0, 0], [5, 0, 0]])
    q = generate_occupancy_queries(cloud, 0.2)
    assert q.n_skipped == 2
    assert len(q.positives) == 1 and q.positive_source.tolist() == [2]


def test_empty_cloud_gives_empty_queries():
    q = generate_occupancy_queries(PointCloud(np.zeros((0, 3))))
    assert q.positives.shape == (0, 3) and q.negatives.shape == (0, 3)


@pytest.mark.parametrize("kw", [{"r_occ": 0.0}, {"law": "gauss"}, {"law": "fixed", "negatives_per_point": 2}])
def test_query_argument_errors(kw):
    with pytest.raises(ValueError):
        generate_occupancy_queries(PointCloud([[1.0, 0, 0]]), **kw)


def test_scaling_scene_keeps_offsets(rng):
    pts = rng.uniform(2, 20, (100, 3))
    a = generate_occupancy_queries(PointCloud(pts), 0.3)
    b = generate_occupancy_queries(PointCloud(3.0 * pts), 0.3)
    np.testing.assert_allclose(b.positives - 3.0 * pts, a.positives - pts, atol=1e-12)


def test_query_set_roundtrip(tmp_path, rng):
    q = generate_occupancy_queries(PointCloud(rng.uniform(1, 5, (30, 3))))
    q.save(tmp_path / "q.npz")
    r = OccupancyQuerySet.load(tmp_path / "q.npz")
    np.testing.assert_array_equal(r.negatives, q.negatives)
    np.testing.assert_array_equal(r.negative_source, q.negative_source)
    pts, labels = r.points_and_labels()
    assert len(pts) == 90 and labels.sum() == 30


def test_height_map_examples():
    h = build_height_map(PointCloud([[0.1, 0.1, 1.5]]), (0, 0), 0.4, (4, 4))
    assert h.values[0, 0] == 1.5 and h.valid.sum() == 1
    h = build_height_map(PointCloud([[0.1, 0.1, 1.5], [0.2, 0.2, 2.0]]), (0, 0), 0.4, (4, 4))
    assert h.values[0, 0] == 2.0


def test_height_map_matches_brute_force(rng):
    pts = np.c_[rng.uniform(-1, 7, 10_000), rng.uniform(-4, 4, 10_000), rng.normal(size=10_000)]
    h = build_height_map(PointCloud(pts), (0.0, -3.2), 0.4, (16, 16))
    values, valid = height_map_brute(pts, (0.0, -3.2), 0.4, (16, 16))
    np.testing.assert_array_equal(h.valid, valid)
    np.testing.assert_array_equal(h.values, values)
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < 6.4) & (pts[:, 1] >= -3.2) & (pts[:, 1] < 3.2)
    assert h.n_outside == int((~inside).sum())


def test_height_map_negative_z_and_permutation(rng):
    pts = np.c_[rng.uniform(0, 1.6, 500), rng.uniform(0, 1.6, 500), rng.uniform(-3, -1, 500)]
    a = build_height_map(PointCloud(pts), (0, 0), 0.4, (4, 4))
    b = build_height_map(PointCloud(pts[rng.permutation(500)]), (0, 0), 0.4, (4, 4))
    assert np.all(a.values[a.valid] < 0)
    np.testing.assert_array_equal(a.values, b.values)


def test_default_grid_height_map_is_128_square():
    h = height_map_for_grid(PointCloud(np.zeros((0, 3))), VoxelGridSpec())
    assert h.dims == (128, 128) and h.cell_size == 0.4


@pytest.mark.parametrize("args", [((0, 0), 0.0, (2, 2)), ((0, 0), 0.4, (0, 2))])
def test_height_map_argument_errors(args):
    with pytest.raises(ValueError):
        build_height_map(PointCloud(np.zeros((0, 3))), *args)


def test_query_height_labels_mask(rng):
    lidar = np.c_[rng.uniform(0, 3.2, 300), rng.uniform(0, 3.2, 300), rng.uniform(0, 2, 300)]
    radar = np.c_[rng.uniform(0, 4.0, 40), rng.uniform(0, 4.0, 40), np.zeros(40)]
    hmap = build_height_map(PointCloud(lidar), (0, 0), 0.4, (10, 10))
    labels, mask = query_height_labels(hmap, PointCloud(radar))
    radar_cells = {(int(x // 0.4), int(y // 0.4)) for x, y, _ in radar}
    lidar_cells = {(int(x // 0.4), int(y // 0.4)) for x, y, _ in lidar}
    assert mask.sum() == len(radar_cells & lidar_cells)
    assert not np.any(mask & ~hmap.valid)
    np.testing.assert_array_equal(labels[mask], hmap.values[mask])
    assert np.all(labels[~mask] == 0)


def test_query_height_labels_examples():
    hmap = build_height_map(PointCloud([[0.1, 0.1, 1.3]]), (0, 0), 0.4, (2, 2))
    labels, mask = query_height_labels(hmap, PointCloud([[0.3, 0.2, 0.0], [0.5, 0.5, 0.0]]))
    assert labels[0, 0] == 1.3 and mask[0, 0]
    assert not mask[1, 1]


def test_height_map_binary_and_pgm(tmp_path, rng):
    pts = np.c_[rng.uniform(0, 4, 100), rng.uniform(0, 4, 100), rng.uniform(-1, 1, 100)]
    h = build_height_map(PointCloud(pts), (0, 0), 0.4, (10, 10))
    save_height_map(h, tmp_path / "h.hmap")
    r = load_height_map(tmp_path / "h.hmap")
    np.testing.assert_array_equal(r.valid, h.valid)
    np.testing.assert_array_equal(r.values, h.values.astype(np.float32))
    assert r.dims == h.dims and r.cell_size == 0.4
    export_height_map_pgm(h, tmp_path / "h.pgm")
    img = read_pgm(tmp_path / "h.pgm")
    assert img.shape == (10, 10)
    assert img[~h.valid].max(initial=0) == 0


def test_load_height_map_rejects_garbage(tmp_path):
    (tmp_path / "x.hmap").write_bytes(b"NOPE" + b"\0" * 40)
    with pytest.raises(ValueError, match="HMAP"):
        load_height_map(tmp_path / "x.hmap")


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1.99), st.floats(0, 1.99), st.floats(-5, 5)), min_size=1, max_size=40))
def test_height_map_property(points):
    pts = np.array(points)
    h = build_height_map(PointCloud(pts), (0, 0), 0.5, (4, 4))
    values, valid = height_map_brute(pts, (0, 0), 0.5, (4, 4))
    np.testing.assert_array_equal(h.valid, valid)
    np.testing.assert_array_equal(h.values, values)
