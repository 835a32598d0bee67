import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rolls.geometry import GeometryError, PointCloud, RigidTransform, transform_cloud


def random_transform(rng):
    return RigidTransform.from_euler(*rng.uniform(-np.pi, np.pi, 3), t=rng.uniform(-5, 5, 3))


def test_identity_leaves_cloud_unchanged(rng):
    cloud = PointCloud(rng.normal(size=(50, 3)), rng.normal(size=3), "lidar",
                       {"intensity": rng.random(50)})
    out = transform_cloud(cloud, RigidTransform.identity())
    assert out.equals(cloud)


def test_translation_moves_point():
    out = transform_cloud(PointCloud([[2.0, 3.0, 4.0]]), RigidTransform.from_translation((1, 0, 0)))
    np.testing.assert_array_equal(out.points, [[3.0, 3.0, 4.0]])
    np.testing.assert_array_equal(out.sensor_origin, [1.0, 0.0, 0.0])


def test_compose_matches_sequential_application(rng):
    T1, T2 = random_transform(rng), random_transform(rng)
    pts = rng.uniform(-50, 50, (1000, 3))
    composed = T1.compose(T2).apply(pts)
    sequential = T1.apply(T2.apply(pts))
    assert np.abs(composed - sequential).max() < 1e-9
    # the 4x4 matrix form agrees as well
    homo = np.c_[pts, np.ones(len(pts))] @ (T1.matrix() @ T2.matrix()).T
    assert np.abs(homo[:, :3] - composed).max() < 1e-9


def test_input_not_modified_and_attributes_kept(rng):
    cloud = PointCloud(rng.normal(size=(10, 3)), attributes={"intensity": np.arange(10.0)})
    before = cloud.copy()
    out = transform_cloud(cloud, random_transform(rng))
    assert cloud.equals(before)
    np.testing.assert_array_equal(out.attributes["intensity"], np.arange(10.0))


def test_distances_preserved_and_inverse_roundtrip(rng):
    T = random_transform(rng)
    cloud = PointCloud(rng.uniform(-20, 20, (200, 3)), rng.normal(size=3))
    moved = transform_cloud(cloud, T)
    d0 = np.linalg.norm(cloud.points[:100] - cloud.points[100:], axis=1)
    d1 = np.linalg.norm(moved.points[:100] - moved.points[100:], axis=1)
    assert np.abs(d0 - d1).max() < 1e-9
    back = transform_cloud(moved, T.inverse())
    assert np.abs(back.points - cloud.points).max() < 1e-9
    assert np.abs(back.sensor_origin - cloud.sensor_origin).max() < 1e-9


@pytest.mark.parametrize("R, fragment", [
    (np.diag([1.0, 1.0, -1.0]), "determinant"),
    (np.diag([1.0, 2.0, 1.0]), "orthonormal"),
    (np.eye(3) * np.nan, "non-finite"),
])
def test_invalid_rotation_rejected(R, fragment):
    with pytest.raises(GeometryError, match=fragment):
        RigidTransform(R, np.zeros(3))


def test_cloud_invariants():
    with pytest.raises(GeometryError, match="shape"):
        PointCloud(np.zeros((4, 2)))
    with pytest.raises(GeometryError, match="attribute"):
        PointCloud(np.zeros((4, 3)), attributes={"i": np.zeros(3)})
    with pytest.raises(GeometryError, match="finite"):
        PointCloud(np.zeros((1, 3)), sensor_origin=[np.inf, 0, 0])
    assert len(PointCloud(np.zeros(0))) == 0


@settings(max_examples=50, deadline=None)
@given(st.tuples(*[st.floats(-np.pi, np.pi)] * 3), st.tuples(*[st.floats(-100, 100)] * 3))
def test_inverse_composes_to_identity(angles, t):
    T = RigidTransform.from_euler(*angles, t=t)
    I = T.compose(T.inverse())
    assert np.abs(I.rotation - np.eye(3)).max() < 1e-9
    assert np.abs(I.translation).max() < 1e-9
