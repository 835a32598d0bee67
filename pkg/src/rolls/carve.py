"""Voxel ray traversal (Amanatides & Woo DDA), LiDAR ray carving and depth rendering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointCloud
from .occupancy import FREE, OCCUPIED, UNKNOWN, OccupancyGrid
from .tpv import VoxelGridSpec


def clip_to_box(origins, dirs, lo, hi, t_lo, t_hi):
    """Slab clipping of ``origin + t * dir`` against ``[lo, hi]``; returns ``(t0, t1)``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    t_near = np.where(dirs == 0, np.where((origins >= lo) & (origins < hi), -np.inf, np.inf),
                      np.minimum(ta, tb))
    t_far = np.where(dirs == 0, np.where((origins >= lo) & (origins < hi), np.inf, -np.inf),
                     np.maximum(ta, tb))
    t0 = np.maximum(t_lo, t_near.max(axis=1))
    t1 = np.minimum(t_hi, t_far.min(axis=1))
    return t0, t1


@dataclass
class Traversal:
    """Cells visited by each ray, in visiting order.

    ``ray`` and ``cells`` (``M x 3``) are parallel; entries of one ray are
    contiguous only after ``order()``. ``t_enter`` is the ray parameter at
    which each cell is entered.
    """

    ray: np.ndarray
    cells: np.ndarray
    t_enter: np.ndarray
    step: np.ndarray

    def order(self) -> Traversal:
        idx = np.lexsort((self.step, self.ray))
        return Traversal(self.ray[idx], self.cells[idx], self.t_enter[idx], self.step[idx])


def traverse(spec: VoxelGridSpec, origins: np.ndarray, dirs: np.ndarray, t_max) -> Traversal:
    """Enumerate in-grid voxels pierced by ``origin + t * dir`` for ``t`` in ``[0, t_max]``.

    All rays advance in lockstep. At each step the axis whose next boundary is
    nearest is crossed (ties resolve X before Y before Z). Boundary times are
    recomputed from the cell index each step rather than accumulated.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    lo, v, dims = spec.lo, spec.voxel_size, np.array(spec.dims)
    t0, t1 = clip_to_box(origins, dirs, lo, spec.hi, 0.0, t_max)
    active = t0 <= t1
    # rays that miss the box have infinite t0; park them at the origin
    start = origins + np.where(active, t0, 0.0)[:, None] * dirs
    cell = np.floor((start - lo) / v).astype(np.int64)
    inside_start = t0 == 0.0
    cell = np.where(inside_start[:, None], cell, np.clip(cell, 0, dims - 1))
    active &= np.all((cell >= 0) & (cell < dims), axis=1)
    step = np.where(dirs > 0, 1, np.where(dirs < 0, -1, 0))
    t_enter = t0.copy()

    rays_out, cells_out, t_out, steps_out = [], [], [], []
    idx = np.flatnonzero(active)
    cell, step, t_enter, t1 = cell[idx], step[idx], t_enter[idx], t1[idx]
    o, d = origins[idx], dirs[idx]
    k = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        while len(idx):
            rays_out.append(idx)
            cells_out.append(cell.copy())
            t_out.append(t_enter.copy())
            steps_out.append(np.full(len(idx), k))
            boundary = lo + (cell + (step > 0)) * v
            t_next = np.where(step != 0, (boundary - o) / d, np.inf)
            axis = np.argmin(t_next, axis=1)
            tn = t_next[np.arange(len(idx)), axis]
            cont = tn < t1
            cell[np.arange(len(idx)), axis] += step[np.arange(len(idx)), axis]
            cont &= np.all((cell >= 0) & (cell < dims), axis=1)
            t_enter = tn
            idx, cell, step, t_enter, t1, o, d = (
                a[cont] for a in (idx, cell, step, t_enter, t1, o, d)
            )
            k += 1
    if not rays_out:
        empty = np.zeros(0, np.int64)
        return Traversal(empty, np.zeros((0, 3), np.int64), np.zeros(0), empty)
    return Traversal(
        np.concatenate(rays_out), np.concatenate(cells_out),
        np.concatenate(t_out), np.concatenate(steps_out),
    )


def carve_labels(spec: VoxelGridSpec, sensor: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Tri-state labels ``(nz, nx, ny)`` from rays sensor -> point; OCCUPIED beats FREE."""
    nx, ny, nz = spec.dims
    labels = np.full((nz, nx, ny), UNKNOWN, dtype=np.int8)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return labels
    sensor = np.asarray(sensor, dtype=np.float64).reshape(3)
    tr = traverse(spec, np.broadcast_to(sensor, points.shape), points - sensor, 1.0)
    labels[tr.cells[:, 2], tr.cells[:, 0], tr.cells[:, 1]] = FREE
    end = spec.cell_coords(points)
    end = end[spec.in_bounds(end)]
    labels[end[:, 2], end[:, 0], end[:, 1]] = OCCUPIED
    return labels


def lidar_teacher_occupancy(lidar: PointCloud, spec: VoxelGridSpec) -> OccupancyGrid:
    """Ray-carved occupancy: FREE along each ray, OCCUPIED at each return, else UNKNOWN."""
    return OccupancyGrid.from_labels(spec, carve_labels(spec, lidar.sensor_origin, lidar.points))


def first_hit_depth(grid: OccupancyGrid, sensor, dirs, threshold: float = 0.5):
    """Distance along each unit direction to the first cell with ``prob >= threshold``.

    Returns ``(depth, hit)``; rays leaving the grid without a hit have
    ``hit = False`` and ``depth = nan``.
    """
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(dirs)
    sensor = np.broadcast_to(np.asarray(sensor, dtype=np.float64).reshape(3), dirs.shape)
    tr = traverse(grid.spec, sensor, dirs, np.inf)
    occ = grid.probs[tr.cells[:, 2], tr.cells[:, 0], tr.cells[:, 1]] >= threshold
    depth = np.full(n, np.inf)
    np.minimum.at(depth, tr.ray[occ], tr.t_enter[occ])
    hit = np.isfinite(depth)
    depth[~hit] = np.nan
    return depth, hit
