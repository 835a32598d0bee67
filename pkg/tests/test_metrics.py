import json

import jsonschema
import numpy as np
import pytest
from conftest import SMALL_SPEC
from oracles import boundary_scan, chamfer_brute, march_first_hit, nn_linear

from rolls.carve import carve_labels
from rolls.metrics import (
    REPORT_SCHEMA,
    MetricError,
    MetricsReport,
    build_nn_index,
    chamfer,
    depth_l2_ar,
    evaluate,
    extract_surface,
    near_field_chamfer,
    query_nn,
)
from rolls.occupancy import OCCUPIED, OccupancyGrid


def test_surface_examples():
    assert len(extract_surface(OccupancyGrid(SMALL_SPEC, np.zeros((6, 16, 16))))) == 0
    probs = np.zeros((6, 16, 16))
    probs[2, 5, 9] = 0.9
    surf = extract_surface(OccupancyGrid(SMALL_SPEC, probs))
    np.testing.assert_array_equal(surf.points, SMALL_SPEC.voxel_centers([[5, 9, 2]]))


def test_surface_matches_boundary_scan(rng):
    probs = rng.random((6, 16, 16)) ** 3
    surf = extract_surface(OccupancyGrid(SMALL_SPEC, probs), 0.3)
    cells = boundary_scan(probs, 0.3)
    expect = SMALL_SPEC.voxel_centers(cells)
    order = np.lexsort(expect.T[::-1])
    got = surf.points[np.lexsort(surf.points.T[::-1])]
    np.testing.assert_array_equal(got, expect[order])


def test_chamfer_examples():
    a = np.array([[0.0, 0.0, 0.0]])
    assert chamfer(a, a) == 0.0
    assert chamfer(a, [[1.0, 0.0, 0.0]]) == 1.0
    with pytest.raises(MetricError, match="empty"):
        chamfer(a, np.zeros((0, 3)))


@pytest.mark.parametrize("na, nb", [(1, 1), (50, 2000), (2000, 1500)])
def test_chamfer_matches_brute_force(rng, na, nb):
    a, b = rng.uniform(-10, 10, (na, 3)), rng.normal(size=(nb, 3)) * 4
    assert abs(chamfer(a, b) - chamfer_brute(a, b)) < 1e-9


def test_chamfer_symmetry_and_translation(rng):
    a, b = rng.uniform(-20, 20, (800, 3)), rng.uniform(-20, 20, (600, 3))
    t = rng.uniform(-5, 5, 3)
    assert abs(chamfer(a, b) - chamfer(b, a)) < 1e-12
    assert abs(chamfer(a + t, b + t) - chamfer(a, b)) < 1e-12


def test_near_field(rng):
    a, b = rng.uniform(-40, 40, (500, 3)), rng.uniform(-40, 40, (500, 3))
    sensor = np.zeros(3)
    fa, fb = a[np.linalg.norm(a, axis=1) <= 20], b[np.linalg.norm(b, axis=1) <= 20]
    assert abs(near_field_chamfer(a, b, sensor, 20.0) - chamfer_brute(fa, fb)) < 1e-9
    assert near_field_chamfer(a, b, sensor, np.inf) == chamfer(a, b)
    with pytest.raises(MetricError, match="within"):
        near_field_chamfer(a + 100, b, sensor, 20.0)
    with pytest.raises(MetricError):
        near_field_chamfer(a, b, sensor, 0.0)


def test_nn_index_matches_linear_scan(rng):
    pts = rng.uniform(-10, 10, (5000, 3))
    queries = rng.uniform(-11, 11, (1000, 3))
    index = build_nn_index(pts)
    idx, dist = index.query(queries)
    for n, q in enumerate(queries):
        i, d = nn_linear(pts, q)
        assert idx[n] == i and dist[n] == d


def test_nn_ties_and_trivial_cases():
    pts = np.array([[1.0, 0, 0], [-1.0, 0, 0], [0, 1.0, 0], [1.0, 0, 0]])
    idx, _ = build_nn_index(pts).query([[0.0, 0, 0], [1.0, 0, 0]])
    assert idx.tolist() == [0, 0]
    p, d = query_nn(build_nn_index([[3.0, 2, 1]]), [100.0, 0, 0])
    np.testing.assert_array_equal(p, [3.0, 2, 1])
    assert query_nn(build_nn_index(pts), pts[2])[1] == 0.0
    with pytest.raises(MetricError):
        build_nn_index(np.zeros((0, 3)))


def test_depth_examples():
    probs = np.zeros((6, 16, 16))
    probs[:, 12:, :] = 1.0  # wall from x = 4.8
    grid = OccupancyGrid(SMALL_SPEC, probs)
    sensor = np.array([0.0, 0.1, 0.1])
    gt = sensor + np.array([[4.8, 0, 0]])
    d = depth_l2_ar(grid, gt, sensor)
    assert d.l2 < 1e-12 and d.ar < 1e-12 and d.n_rays == 1
    gt = sensor + np.array([[4.0, 0, 0], [0, 0, 0]])
    d = depth_l2_ar(grid, gt, sensor)
    assert abs(d.l2 - 0.8) < 1e-12 and abs(d.ar - 0.2) < 1e-12 and d.n_too_close == 1
    with pytest.raises(MetricError, match="no evaluable"):
        depth_l2_ar(OccupancyGrid(SMALL_SPEC, np.zeros((6, 16, 16))), gt, sensor)


def test_depth_matches_fine_marcher(rng):
    probs = (rng.random((6, 16, 16)) < 0.08).astype(float)
    grid = OccupancyGrid(SMALL_SPEC, probs)
    sensor = np.array([0.0, 0.05, -0.1])
    targets = rng.uniform(SMALL_SPEC.lo + [1, 0, 0], SMALL_SPEC.hi, (200, 3))
    dirs = (targets - sensor) / np.linalg.norm(targets - sensor, axis=1)[:, None]
    from rolls.carve import first_hit_depth
    depth, hit = first_hit_depth(grid, sensor, dirs)
    oracle = np.array([march_first_hit(probs, SMALL_SPEC, sensor, d) for d in dirs])
    assert hit.sum() > 100
    both = hit & np.isfinite(oracle)
    assert np.abs(depth[both] - oracle[both]).max() <= SMALL_SPEC.diagonal
    # aggregate errors against the same GT agree within one diagonal as well
    ours = depth_l2_ar(grid, targets, sensor)
    err = np.abs(oracle[both] - np.linalg.norm(targets - sensor, axis=1)[both])
    assert abs(ours.l2 - err.mean()) <= SMALL_SPEC.diagonal


def test_carved_gt_depth_within_diagonal(rng):
    sensor = np.array([0.0, 0.0, 0.0])
    # returns on a wall facing the sensor, as a LiDAR would see it
    pts = np.c_[np.full(100, 5.0), rng.uniform(-3.0, 3.0, 100), rng.uniform(-1.1, 1.1, 100)]
    grid = OccupancyGrid(SMALL_SPEC, (carve_labels(SMALL_SPEC, sensor, pts) == OCCUPIED).astype(float))
    assert depth_l2_ar(grid, pts, sensor).l2 <= SMALL_SPEC.diagonal


def test_report_schema_and_table(rng):
    probs = np.zeros((6, 16, 16))
    probs[:, 10:, :] = 1.0
    grid = OccupancyGrid(SMALL_SPEC, probs)
    gt = SMALL_SPEC.voxel_centers(np.c_[np.full(20, 10), rng.integers(0, 16, 20), rng.integers(0, 6, 20)])
    rep = evaluate(grid, gt, gt, np.zeros(3), r_nf=20.0)
    jsonschema.validate(json.loads(rep.to_json()), REPORT_SCHEMA)
    head, row = rep.table("seq").splitlines()
    assert head.split() == ["Sequence", "CD", "NFCD", "AR", "L2"]
    assert [float(v) for v in row.split()[1:]] == [round(x, 3) for x in (rep.cd, rep.nfcd, rep.ar, rep.l2)]
    assert rep.config["cd_convention"].startswith("symmetric mean")
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({**rep.to_dict(), "cd": -1.0}, REPORT_SCHEMA)
    no_nf = MetricsReport(1.0, None, 2.0, 0.1)
    assert "-" in no_nf.table().splitlines()[1]


def test_evaluate_empty_prediction_errors():
    grid = OccupancyGrid(SMALL_SPEC, np.zeros((6, 16, 16)))
    with pytest.raises(MetricError, match="no surface"):
        evaluate(grid, [[1.0, 0, 0]], [[1.0, 0, 0]], np.zeros(3))
