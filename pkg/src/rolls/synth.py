"""Deterministic synthetic scenes with analytic ray casting.

Scenes are built from four primitive kinds: an infinite ground plane (solid
below ``z0``), axis-aligned boxes, vertical cylinders and zero-thickness
vertical wall segments. LiDAR is a noiseless first-hit ray caster; radar
degrades the same rays with dropout, Gaussian jitter, surface penetration and
multipath ghosts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud, RigidTransform
from .occupancy import OccupancyGrid
from .tpv import VoxelGridSpec

EPS_T = 1e-9
SHELL_TOL = 1e-9


@dataclass(frozen=True)
class Ground:
    z0: float = -1.7
    kind = "ground"

    def entry(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z0 - o[:, 2]) / d[:, 2]
        ok = (o[:, 2] > self.z0) & (d[:, 2] < 0) & (t > EPS_T)
        return np.where(ok, t, np.inf)

    def surface_distance(self, p):
        return np.abs(p[:, 2] - self.z0)

    def touches_cube(self, centers, half):
        return centers[:, 2] - half <= self.z0 + SHELL_TOL

    def to_dict(self):
        return {"type": "ground", "z0": self.z0}


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]
    kind = "box"

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box extents must be positive, got {self.size}")

    @property
    def lo(self):
        return np.asarray(self.center, float) - np.asarray(self.size, float) / 2

    @property
    def hi(self):
        return np.asarray(self.center, float) + np.asarray(self.size, float) / 2

    def entry(self, o, d):
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (self.lo - o) / d
            tb = (self.hi - o) / d
        inside_slab = (o >= self.lo) & (o <= self.hi)
        t_near = np.where(d == 0, np.where(inside_slab, -np.inf, np.inf), np.minimum(ta, tb)).max(1)
        t_far = np.where(d == 0, np.where(inside_slab, np.inf, -np.inf), np.maximum(ta, tb)).min(1)
        ok = (t_near <= t_far) & (t_near > EPS_T)
        return np.where(ok, t_near, np.inf)

    def surface_distance(self, p):
        q = np.abs(p - np.asarray(self.center, float)) - np.asarray(self.size, float) / 2
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        return np.abs(outside + inside)

    def touches_cube(self, centers, half):
        return np.all(
            (centers - half <= self.hi + SHELL_TOL) & (centers + half >= self.lo - SHELL_TOL), axis=1
        )

    def to_dict(self):
        return {"type": "box", "center": list(self.center), "size": list(self.size)}


@dataclass(frozen=True)
class Cylinder:
    center: tuple[float, float]
    radius: float
    z_range: tuple[float, float]
    kind = "cylinder"

    def __post_init__(self):
        if self.radius <= 0 or self.z_range[1] <= self.z_range[0]:
            raise ValueError("cylinder needs positive radius and height")

    def entry(self, o, d):
        cx, cy = self.center
        z0, z1 = self.z_range
        ox, oy = o[:, 0] - cx, o[:, 1] - cy
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (ox * d[:, 0] + oy * d[:, 1])
        c = ox**2 + oy**2 - self.radius**2
        disc = b * b - 4 * a * c
        with np.errstate(divide="ignore", invalid="ignore"):
            t_side = (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a)
        z_side = o[:, 2] + t_side * d[:, 2]
        side_ok = (a > 0) & (disc >= 0) & (t_side > EPS_T) & (z_side >= z0) & (z_side <= z1)
        best = np.where(side_ok, t_side, np.inf)
        for zc in (z0, z1):
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (zc - o[:, 2]) / d[:, 2]
            hx, hy = ox + t * d[:, 0], oy + t * d[:, 1]
            facing = (d[:, 2] > 0) if zc == z0 else (d[:, 2] < 0)
            ok = facing & (t > EPS_T) & (hx**2 + hy**2 <= self.radius**2)
            best = np.minimum(best, np.where(ok, t, np.inf))
        return best

    def surface_distance(self, p):
        cx, cy = self.center
        z0, z1 = self.z_range
        r = np.hypot(p[:, 0] - cx, p[:, 1] - cy) - self.radius
        zc = (z0 + z1) / 2
        h = np.abs(p[:, 2] - zc) - (z1 - z0) / 2
        q = np.stack([r, h], axis=1)
        outside = np.linalg.norm(np.maximum(q, 0), axis=1)
        inside = np.minimum(q.max(axis=1), 0)
        return np.abs(outside + inside)

    def touches_cube(self, centers, half):
        cx, cy = self.center
        z0, z1 = self.z_range
        # closest point of each cube's XY square to the axis
        dx = np.maximum(np.abs(centers[:, 0] - cx) - half, 0)
        dy = np.maximum(np.abs(centers[:, 1] - cy) - half, 0)
        in_xy = dx**2 + dy**2 <= self.radius**2 + SHELL_TOL
        in_z = (centers[:, 2] - half <= z1 + SHELL_TOL) & (centers[:, 2] + half >= z0 - SHELL_TOL)
        return in_xy & in_z

    def to_dict(self):
        return {"type": "cylinder", "center": list(self.center), "radius": self.radius,
                "z_range": list(self.z_range)}


@dataclass(frozen=True)
class Wall:
    start: tuple[float, float]
    end: tuple[float, float]
    z_range: tuple[float, float]
    kind = "wall"

    def __post_init__(self):
        if np.hypot(self.end[0] - self.start[0], self.end[1] - self.start[1]) <= 0:
            raise ValueError("wall segment has zero length")
        if self.z_range[1] <= self.z_range[0]:
            raise ValueError("wall needs positive height")

    def _frame(self):
        a = np.asarray(self.start, float)
        b = np.asarray(self.end, float)
        seg = b - a
        n = np.array([-seg[1], seg[0]]) / np.linalg.norm(seg)
        return a, seg, n

    def entry(self, o, d):
        a, seg, n = self._frame()
        denom = d[:, 0] * n[0] + d[:, 1] * n[1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((a[0] - o[:, 0]) * n[0] + (a[1] - o[:, 1]) * n[1]) / denom
        hx, hy = o[:, 0] + t * d[:, 0] - a[0], o[:, 1] + t * d[:, 1] - a[1]
        s = (hx * seg[0] + hy * seg[1]) / (seg @ seg)
        z = o[:, 2] + t * d[:, 2]
        ok = (denom != 0) & (t > EPS_T) & (s >= 0) & (s <= 1) & (z >= self.z_range[0]) & (z <= self.z_range[1])
        return np.where(ok, t, np.inf)

    def surface_distance(self, p):
        a, seg, _ = self._frame()
        rel = p[:, :2] - a
        s = np.clip((rel @ seg) / (seg @ seg), 0, 1)
        dxy = np.linalg.norm(rel - s[:, None] * seg, axis=1)
        dz = np.maximum(np.maximum(self.z_range[0] - p[:, 2], p[:, 2] - self.z_range[1]), 0)
        return np.hypot(dxy, dz)

    def touches_cube(self, centers, half):
        a, seg, _ = self._frame()
        lo = centers[:, :2] - half - SHELL_TOL
        hi = centers[:, :2] + half + SHELL_TOL
        t0 = np.zeros(len(centers))
        t1 = np.ones(len(centers))
        for ax in range(2):
            if seg[ax] == 0:
                ok = (a[ax] >= lo[:, ax]) & (a[ax] <= hi[:, ax])
                t1 = np.where(ok, t1, -1.0)
            else:
                ta = (lo[:, ax] - a[ax]) / seg[ax]
                tb = (hi[:, ax] - a[ax]) / seg[ax]
                t0 = np.maximum(t0, np.minimum(ta, tb))
                t1 = np.minimum(t1, np.maximum(ta, tb))
        in_z = (centers[:, 2] - half <= self.z_range[1] + SHELL_TOL) & (
            centers[:, 2] + half >= self.z_range[0] - SHELL_TOL
        )
        return (t0 <= t1) & in_z

    def to_dict(self):
        return {"type": "wall", "start": list(self.start), "end": list(self.end),
                "z_range": list(self.z_range)}


_KINDS = {"ground": Ground, "box": Box, "cylinder": Cylinder, "wall": Wall}


@dataclass
class SceneSpec:
    primitives: list = field(default_factory=list)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"seed": self.seed, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> SceneSpec:
        prims = []
        for i, item in enumerate(d.get("primitives", [])):
            item = dict(item)
            kind = item.pop("type", None)
            if kind not in _KINDS:
                raise ValueError(f"primitive {i}: unknown type {kind!r}; expected one of {sorted(_KINDS)}")
            prims.append(_KINDS[kind](**{k: tuple(v) if isinstance(v, list) else v for k, v in item.items()}))
        return cls(prims, int(d.get("seed", 0)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> SceneSpec:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def hits(self, origins, dirs):
        """Entry distance of every ray into every primitive, shape ``(n_rays, n_primitives)``."""
        if not self.primitives:
            return np.full((len(origins), 0), np.inf)
        return np.stack([p.entry(origins, dirs) for p in self.primitives], axis=1)

    def surface_distance(self, points):
        points = np.asarray(points, float).reshape(-1, 3)
        if not self.primitives:
            return np.full(len(points), np.inf)
        return np.min([p.surface_distance(points) for p in self.primitives], axis=0)


@dataclass
class RayBundle:
    origins: np.ndarray
    dirs: np.ndarray
    max_range: float


def _angles(n, fov_deg):
    if n == 1:
        return np.zeros(1)
    return np.deg2rad(np.linspace(fov_deg[0], fov_deg[1], n))


def scan_rays(sensor_pose: RigidTransform, n_azimuth: int, n_elevation: int, max_range: float,
              fov_azimuth=(-80.0, 80.0), fov_elevation=(-25.0, 10.0)) -> RayBundle:
    """Unit ray directions on an azimuth x elevation lattice, rotated by the sensor pose.

    A single sample along an axis points straight ahead.
    """
    if n_azimuth < 1 or n_elevation < 1:
        raise ValueError("ray resolutions must be >= 1")
    if not max_range > 0:
        raise ValueError("max_range must be positive")
    el, az = np.meshgrid(_angles(n_elevation, fov_elevation), _angles(n_azimuth, fov_azimuth),
                         indexing="ij")
    local = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], -1).reshape(-1, 3)
    dirs = local @ sensor_pose.rotation.T
    origins = np.broadcast_to(sensor_pose.translation, dirs.shape).copy()
    return RayBundle(origins, dirs, float(max_range))


def cast(scene: SceneSpec, rays: RayBundle):
    """First and second entry distances per ray (``inf`` when absent)."""
    t = np.sort(scene.hits(rays.origins, rays.dirs), axis=1)
    first = t[:, 0] if t.shape[1] else np.full(len(rays.origins), np.inf)
    second = t[:, 1] if t.shape[1] > 1 else np.full(len(rays.origins), np.inf)
    return first, second


def _cloud(points, origin):
    return PointCloud(np.asarray(points).reshape(-1, 3), origin, "world")


def raycast_rays(scene: SceneSpec, rays: RayBundle) -> PointCloud:
    first, _ = cast(scene, rays)
    hit = first <= rays.max_range
    pts = rays.origins[hit] + first[hit, None] * rays.dirs[hit]
    origin = rays.origins[0] if len(rays.origins) else np.zeros(3)
    return _cloud(pts, origin)


def raycast_lidar(scene: SceneSpec, sensor_pose: RigidTransform, n_azimuth: int, n_elevation: int,
                  max_range: float, **fov) -> PointCloud:
    return raycast_rays(scene, scan_rays(sensor_pose, n_azimuth, n_elevation, max_range, **fov))


@dataclass(frozen=True)
class RadarNoiseModel:
    keep_prob: float = 0.5
    sigma_xy: float = 0.1
    sigma_z: float = 0.3
    p_penetrate: float = 0.05
    p_ghost: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("keep_prob", "p_penetrate", "p_ghost"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.sigma_xy < 0 or self.sigma_z < 0:
            raise ValueError("noise sigmas must be non-negative")

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("keep_prob", "sigma_xy", "sigma_z", "p_penetrate", "p_ghost", "seed")}


CLEAN_RADAR = RadarNoiseModel()
SMOKE_RADAR = RadarNoiseModel(keep_prob=0.25, sigma_z=0.3)
# multipath-heavy preset: many ghosts in free space for stage-2 pruning
GHOST_RADAR = RadarNoiseModel(p_penetrate=0.2, p_ghost=0.5)
NOISE_PRESETS = {"clean": CLEAN_RADAR, "smoke": SMOKE_RADAR, "ghost": GHOST_RADAR}

GHOST_RANGE = (1.5, 2.0)


def simulate_radar(scene: SceneSpec, rays: RayBundle, noise: RadarNoiseModel,
                   frame_index: int = 0) -> PointCloud:
    """Degrade the true first returns of ``rays`` into a sparse, noisy radar scan.

    Every random draw is made for every ray in a fixed order from a stream
    seeded by ``(noise.seed, frame_index)``, so results do not depend on which
    options are active. Ghost points follow the real returns in the output.
    """
    n = len(rays.origins)
    rng = np.random.default_rng(np.random.SeedSequence([noise.seed, frame_index]))
    u_keep = rng.random(n)
    u_pen = rng.random(n)
    u_ghost = rng.random(n)
    ghost_scale = rng.uniform(*GHOST_RANGE, size=n)
    jitter = rng.standard_normal((n, 3))
    ghost_jitter = rng.standard_normal((n, 3))
    sigma = np.array([noise.sigma_xy, noise.sigma_xy, noise.sigma_z])

    first, second = cast(scene, rays)
    valid = first <= rays.max_range
    t = first.copy()
    pen = u_pen < noise.p_penetrate
    t[pen] = second[pen]
    keep = valid & (u_keep < noise.keep_prob) & (t <= rays.max_range)
    o, d = rays.origins[keep], rays.dirs[keep]
    pts = o + t[keep, None] * d
    if np.any(sigma > 0):
        pts = pts + jitter[keep] * sigma
    ghost = u_ghost[keep] < noise.p_ghost
    g_pts = o[ghost] + (t[keep][ghost] * ghost_scale[keep][ghost])[:, None] * d[ghost]
    if np.any(sigma > 0):
        g_pts = g_pts + ghost_jitter[keep][ghost] * sigma
    origin = rays.origins[0] if n else np.zeros(3)
    return _cloud(np.concatenate([pts, g_pts]), origin)


def ground_truth_occupancy(scene: SceneSpec, spec: VoxelGridSpec) -> OccupancyGrid:
    """Voxels whose closed cube meets any primitive.

    Equivalently: the center is inside a primitive or within half a voxel of
    its surface, distance measured per axis (Chebyshev).
    """
    nx, ny, nz = spec.dims
    centers = spec.all_centers()
    half = spec.voxel[0] / 2
    occ = np.zeros(len(centers), bool)
    for prim in scene.primitives:
        occ |= prim.touches_cube(centers, half)
    return OccupancyGrid(spec, occ.reshape(nz, nx, ny).astype(np.float64), "ground-truth")


def random_scene(seed: int, spec: VoxelGridSpec | None = None, n_boxes=(3, 6), n_cylinders=(2, 4),
                 n_walls=(1, 2), ground_z: float = -1.7) -> SceneSpec:
    """Street-like scene: ground, car-sized boxes, poles and side walls in front of the sensor."""
    spec = spec or VoxelGridSpec()
    rng = np.random.default_rng(seed)
    x_hi = spec.x_range[1]
    y_lo, y_hi = spec.y_range
    prims: list = [Ground(ground_z)]
    for _ in range(rng.integers(*n_boxes, endpoint=True)):
        size = (rng.uniform(3.0, 5.0), rng.uniform(1.6, 2.2), rng.uniform(1.4, 2.0))
        cx = rng.uniform(min(6.0, 0.3 * x_hi), 0.8 * x_hi)
        cy = rng.uniform(0.6 * y_lo, 0.6 * y_hi)
        prims.append(Box((cx, cy, ground_z + size[2] / 2), size))
    for _ in range(rng.integers(*n_cylinders, endpoint=True)):
        prims.append(Cylinder((rng.uniform(min(5.0, 0.3 * x_hi), 0.8 * x_hi), rng.uniform(0.7 * y_lo, 0.7 * y_hi)),
                              rng.uniform(0.2, 0.6), (ground_z, ground_z + rng.uniform(2.5, 4.0))))
    for _ in range(rng.integers(*n_walls, endpoint=True)):
        side = rng.choice([-1.0, 1.0])
        y = side * rng.uniform(min(8.0, 0.5 * y_hi), 0.8 * y_hi)
        x0 = rng.uniform(min(3.0, 0.2 * x_hi), min(15.0, 0.5 * x_hi))
        prims.append(Wall((x0, y), (x0 + rng.uniform(15.0, 30.0), y + rng.uniform(-2.0, 2.0)),
                          (ground_z, ground_z + rng.uniform(2.0, 3.5))))
    return SceneSpec(prims, seed)
