"""Point clouds and rigid transforms.

Coordinates follow the vehicle convention used everywhere in this package:
X forward, Y left, Z up, all in meters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    pass


@dataclass
class PointCloud:
    """A set of 3D points observed from a single sensor position.

    ``points`` is an ``(N, 3)`` float64 array. ``attributes`` maps channel
    names (e.g. ``"intensity"``) to length-N arrays.
    """

    points: np.ndarray
    sensor_origin: np.ndarray = field(default_factory=lambda: np.zeros(3))
    frame_id: str = "world"
    attributes: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (N, 3), got {pts.shape}")
        origin = np.asarray(self.sensor_origin, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(origin)):
            raise GeometryError("sensor_origin must be finite")
        attrs = {}
        for name, values in self.attributes.items():
            values = np.asarray(values, dtype=np.float64).reshape(-1)
            if len(values) != len(pts):
                raise GeometryError(
                    f"attribute {name!r} has {len(values)} entries for {len(pts)} points"
                )
            attrs[name] = values
        self.points = pts
        self.sensor_origin = origin
        self.attributes = attrs

    def __len__(self) -> int:
        return len(self.points)

    def copy(self) -> PointCloud:
        return PointCloud(
            self.points.copy(),
            self.sensor_origin.copy(),
            self.frame_id,
            {k: v.copy() for k, v in self.attributes.items()},
        )

    def subset(self, keep: np.ndarray) -> PointCloud:
        return PointCloud(
            self.points[keep],
            self.sensor_origin.copy(),
            self.frame_id,
            {k: v[keep] for k, v in self.attributes.items()},
        )

    def equals(self, other: PointCloud) -> bool:
        if self.frame_id != other.frame_id or set(self.attributes) != set(other.attributes):
            return False
        return (
            np.array_equal(self.points, other.points)
            and np.array_equal(self.sensor_origin, other.sensor_origin)
            and all(np.array_equal(v, other.attributes[k]) for k, v in self.attributes.items())
        )


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise GeometryError(f"expected 3x3 rotation and 3-vector, got {R.shape} and {t.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise GeometryError("transform contains non-finite entries")
        ortho_err = np.abs(R.T @ R - np.eye(3)).max()
        if ortho_err > ORTHO_TOL:
            raise GeometryError(f"rotation is not orthonormal (max |R^T R - I| = {ortho_err:.3e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > ORTHO_TOL:
            raise GeometryError(f"rotation determinant is {det:.12f}, expected +1 (reflection?)")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> RigidTransform:
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    @classmethod
    def from_euler(cls, roll: float, pitch: float, yaw: float, t=(0.0, 0.0, 0.0)) -> RigidTransform:
        """Build from Z-Y-X (yaw, pitch, roll) angles in radians."""
        cr, sr = np.cos(roll), np.sin(roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cy, sy = np.cos(yaw), np.sin(yaw)
        Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        return cls(Rz @ Ry @ Rx, np.asarray(t, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    def inverse(self) -> RigidTransform:
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


def transform_cloud(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """Map every point and the sensor origin through ``T``; the input is left untouched."""
    return PointCloud(
        T.apply(cloud.points),
        T.apply(cloud.sensor_origin[None, :])[0],
        cloud.frame_id,
        {k: v.copy() for k, v in cloud.attributes.items()},
    )
