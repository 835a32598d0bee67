"""Voxel grid bookkeeping and tri-perspective-view (TPV) plane pooling.

Axis naming used throughout: ``H`` indexes X cells, ``W`` indexes Y cells and
``D`` indexes Z cells. The three planes are

* ``f_bev``: ``C x H x W`` (top-down, Z collapsed)
* ``f_fv``:  ``C x W x D`` (front view, X collapsed)
* ``f_sv``:  ``C x H x D`` (side view, Y collapsed)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pgm import to_gray, write_pgm

FILL_VALUE = 0.0


@dataclass(frozen=True)
class VoxelGridSpec:
    x_range: tuple[float, float] = (0.0, 51.2)
    y_range: tuple[float, float] = (-25.6, 25.6)
    z_range: tuple[float, float] = (-3.0, 3.0)
    voxel: tuple[float, float, float] = (0.4, 0.4, 0.4)

    def __post_init__(self):
        for name, (lo, hi), v in zip("xyz", self.ranges, self.voxel):
            if not v > 0:
                raise ValueError(f"voxel size along {name} must be positive, got {v}")
            if not hi > lo:
                raise ValueError(f"{name}_range must be increasing, got ({lo}, {hi})")
            n = round((hi - lo) / v)
            if n < 1 or abs(n * v - (hi - lo)) > 1e-9 * max(1.0, hi - lo):
                raise ValueError(
                    f"{name}_range ({lo}, {hi}) is not an integer multiple of voxel size {v}"
                )

    @property
    def ranges(self):
        return (tuple(self.x_range), tuple(self.y_range), tuple(self.z_range))

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x_range[0], self.y_range[0], self.z_range[0]], dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x_range[1], self.y_range[1], self.z_range[1]], dtype=np.float64)

    @property
    def voxel_size(self) -> np.ndarray:
        return np.asarray(self.voxel, dtype=np.float64)

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(nx, ny, nz)``, recomputed from ranges and voxel size."""
        return tuple(
            int(round((hi - lo) / v)) for (lo, hi), v in zip(self.ranges, self.voxel)
        )

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.voxel_size))

    def cell_coords(self, points: np.ndarray) -> np.ndarray:
        """Integer cell indices (unbounded) for each point, half-open cells ``[lo, hi)``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return np.floor((points - self.lo) / self.voxel_size).astype(np.int64)

    def in_bounds(self, cells: np.ndarray) -> np.ndarray:
        cells = np.asarray(cells).reshape(-1, 3)
        return np.all((cells >= 0) & (cells < np.array(self.dims)), axis=1)

    def voxel_centers(self, cells: np.ndarray) -> np.ndarray:
        return self.lo + (np.asarray(cells, dtype=np.float64) + 0.5) * self.voxel_size

    def all_centers(self) -> np.ndarray:
        """Centers of every voxel, ordered ``(D, H, W)`` row-major (Z slowest)."""
        nx, ny, nz = self.dims
        k, i, j = np.meshgrid(np.arange(nz), np.arange(nx), np.arange(ny), indexing="ij")
        cells = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        return self.voxel_centers(cells)

    def to_dict(self) -> dict:
        return {
            "x_range": list(self.x_range),
            "y_range": list(self.y_range),
            "z_range": list(self.z_range),
            "voxel": list(self.voxel),
        }

    @classmethod
    def from_dict(cls, d: dict) -> VoxelGridSpec:
        return cls(
            tuple(d["x_range"]), tuple(d["y_range"]), tuple(d["z_range"]), tuple(d["voxel"])
        )


@dataclass
class SparseVoxels:
    """Occupied voxels only: ``cells`` is ``K x 3`` (sorted by linear key), ``features`` ``K x C``.

    ``point_voxel`` maps each retained input point to its row in ``cells``;
    ``kept`` flags which input points fell inside the grid.
    """

    cells: np.ndarray
    features: np.ndarray
    point_voxel: np.ndarray
    kept: np.ndarray
    n_dropped: int


@dataclass
class TpvFeatures:
    f_bev: np.ndarray
    f_fv: np.ndarray
    f_sv: np.ndarray
    occupancy_mask_bev: np.ndarray

    @property
    def channels(self) -> int:
        return self.f_bev.shape[0]


def linear_keys(cells: np.ndarray, dims) -> np.ndarray:
    nx, ny, nz = dims
    cells = np.asarray(cells, dtype=np.int64)
    return (cells[:, 0] * ny + cells[:, 1]) * nz + cells[:, 2]


def assign_voxels(points: np.ndarray, spec: VoxelGridSpec):
    """Group points into voxels.

    Returns ``(cells, point_voxel, kept)`` with ``cells`` sorted by linear key so
    the result is independent of input order.
    """
    coords = spec.cell_coords(points)
    kept = spec.in_bounds(coords)
    coords = coords[kept]
    keys = linear_keys(coords, spec.dims)
    uniq, inverse = np.unique(keys, return_inverse=True)
    nx, ny, nz = spec.dims
    cells = np.stack([uniq // (ny * nz), (uniq // nz) % ny, uniq % nz], axis=1)
    return cells, inverse.reshape(-1), kept


def segment_max(values: np.ndarray, segments: np.ndarray, n_segments: int, fill=FILL_VALUE):
    """Row-wise max of ``values`` grouped by ``segments``; empty segments get ``fill``."""
    values = np.asarray(values, dtype=np.float64)
    out = np.full((n_segments, values.shape[1]), -np.inf)
    if len(values):
        np.maximum.at(out, segments, values)
    out[np.isneginf(out)] = fill
    return out


def voxelize_max(points: np.ndarray, features: np.ndarray, spec: VoxelGridSpec) -> SparseVoxels:
    """Scatter per-point features into voxels with an elementwise max."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) != len(points):
        raise ValueError(f"features must be N x C with N={len(points)}, got {features.shape}")
    if not np.all(np.isfinite(features)):
        raise ValueError("voxelize_max: non-finite point features")
    cells, point_voxel, kept = assign_voxels(points, spec)
    feats = segment_max(features[kept], point_voxel, len(cells))
    return SparseVoxels(cells, feats, point_voxel, kept, int((~kept).sum()))


def plane_index(cells: np.ndarray, spec: VoxelGridSpec):
    """Flattened pixel index of each voxel on the BEV, FV and SV planes."""
    nx, ny, nz = spec.dims
    i, j, k = cells[:, 0], cells[:, 1], cells[:, 2]
    return i * ny + j, j * nz + k, i * nz + k


def spatial_group_pool(voxels: SparseVoxels, spec: VoxelGridSpec) -> TpvFeatures:
    """Max-reduce voxel features along Z, X and Y to form the three planes."""
    nx, ny, nz = spec.dims
    C = voxels.features.shape[1]
    bev_idx, fv_idx, sv_idx = plane_index(voxels.cells, spec)
    bev = segment_max(voxels.features, bev_idx, nx * ny).T.reshape(C, nx, ny)
    fv = segment_max(voxels.features, fv_idx, ny * nz).T.reshape(C, ny, nz)
    sv = segment_max(voxels.features, sv_idx, nx * nz).T.reshape(C, nx, nz)
    mask = np.zeros(nx * ny, bool)
    mask[bev_idx] = True
    return TpvFeatures(bev, fv, sv, mask.reshape(nx, ny))


TPVF_MAGIC = b"TPVF"
TPVF_VERSION = 1


def save_tpv(tpv: TpvFeatures, path) -> None:
    C, nx, ny = tpv.f_bev.shape
    nz = tpv.f_fv.shape[2]
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack("<4sIIIII", TPVF_MAGIC, TPVF_VERSION, C, nx, ny, nz))
        for plane in (tpv.f_bev, tpv.f_fv, tpv.f_sv):
            fh.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())
        fh.write(np.packbits(tpv.occupancy_mask_bev.ravel()).tobytes())


def load_tpv(path) -> TpvFeatures:
    data = Path(path).read_bytes()
    magic, version, C, nx, ny, nz = struct.unpack_from("<4sIIIII", data, 0)
    if magic != TPVF_MAGIC or version != TPVF_VERSION:
        raise ValueError(f"{path}: not a TPVF v{TPVF_VERSION} file")
    off = 24
    planes = []
    for shape in ((C, nx, ny), (C, ny, nz), (C, nx, nz)):
        n = int(np.prod(shape))
        planes.append(np.frombuffer(data, "<f4", n, off).reshape(shape).astype(np.float64))
        off += 4 * n
    mask = np.unpackbits(np.frombuffer(data, np.uint8, offset=off))[: nx * ny].astype(bool)
    return TpvFeatures(*planes, mask.reshape(nx, ny))


def dump_tpv_pgm(tpv: TpvFeatures, out_dir) -> list[Path]:
    """One PGM per channel per plane, each linearly scaled to its own range."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, plane in (("bev", tpv.f_bev), ("fv", tpv.f_fv), ("sv", tpv.f_sv)):
        for c, channel in enumerate(plane):
            path = out_dir / f"{name}_c{c:02d}.pgm"
            write_pgm(path, to_gray(channel))
            written.append(path)
    return written
