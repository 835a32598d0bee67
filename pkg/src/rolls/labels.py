"""LiDAR-derived supervision: occupancy query points and the max-Z height map."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import PointCloud
from .pgm import to_gray, write_pgm
from .tpv import VoxelGridSpec

DEFAULT_R_OCC = 0.2
DEFAULT_NEGATIVES = 2
NEGATIVE_LAWS = ("mixed", "fixed")


@dataclass
class OccupancyQuerySet:
    """Occupied (``positives``) and free (``negatives``) sample points.

    ``positive_source`` / ``negative_source`` give the index of the LiDAR point
    each query was generated from, ``negative_radius`` the distance each
    negative sits in front of its surface point.
    """

    positives: np.ndarray
    negatives: np.ndarray
    r_occ: float
    source_frame: str = "world"
    positive_source: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    negative_source: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    negative_radius: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_skipped: int = 0

    def points_and_labels(self):
        """Stack queries into ``(Q x 3 points, Q labels)`` with 1 = occupied."""
        pts = np.concatenate([self.positives, self.negatives]).reshape(-1, 3)
        labels = np.concatenate([np.ones(len(self.positives)), np.zeros(len(self.negatives))])
        return pts, labels

    def save(self, path) -> None:
        np.savez(
            path,
            positives=self.positives,
            negatives=self.negatives,
            r_occ=self.r_occ,
            source_frame=self.source_frame,
            positive_source=self.positive_source,
            negative_source=self.negative_source,
            negative_radius=self.negative_radius,
            n_skipped=self.n_skipped,
        )

    @classmethod
    def load(cls, path) -> OccupancyQuerySet:
        with np.load(path) as z:
            return cls(
                z["positives"], z["negatives"], float(z["r_occ"]), str(z["source_frame"]),
                z["positive_source"], z["negative_source"], z["negative_radius"],
                int(z["n_skipped"]),
            )


def generate_occupancy_queries(
    cloud: PointCloud,
    r_occ: float = DEFAULT_R_OCC,
    negatives_per_point: int = DEFAULT_NEGATIVES,
    rng_seed=0,
    law: str = "mixed",
) -> OccupancyQuerySet:
    """Place one occupied query ``r_occ`` behind every return and free queries in front.

    With ``law="mixed"`` the first negative of each point is drawn with its
    offset uniform in ``(0, r_occ]`` and the others uniform over the whole free
    segment between the sensor and the point. ``law="fixed"`` places a single
    negative exactly ``r_occ`` in front of the point.

    Points within ``r_occ`` of the sensor are skipped and counted.
    """
    if not r_occ > 0:
        raise ValueError(f"r_occ must be positive, got {r_occ}")
    if law not in NEGATIVE_LAWS:
        raise ValueError(f"unknown negative sampling law {law!r}; expected one of {NEGATIVE_LAWS}")
    if negatives_per_point < 0 or (law == "fixed" and negatives_per_point != 1):
        raise ValueError(f"law {law!r} does not support negatives_per_point={negatives_per_point}")
    c = cloud.sensor_origin
    offsets = cloud.points - c
    dist = np.linalg.norm(offsets, axis=1)
    keep = dist > r_occ
    idx = np.flatnonzero(keep)
    p, d = cloud.points[keep], dist[keep]
    u = offsets[keep] / d[:, None]
    positives = p + r_occ * u

    rng = np.random.default_rng(rng_seed)
    n, m = len(p), negatives_per_point
    if law == "fixed":
        radius = np.full((n, m), float(r_occ))
    else:
        draws = rng.random((n, m))
        # open interval so negatives never coincide with the sensor or the surface
        draws = np.clip(draws, np.finfo(float).tiny, np.nextafter(1.0, 0.0))
        radius = draws * d[:, None]
        if m:
            radius[:, 0] = r_occ * (1.0 - draws[:, 0])
    negatives = (p[:, None, :] - radius[..., None] * u[:, None, :]).reshape(-1, 3)
    return OccupancyQuerySet(
        positives=positives,
        negatives=negatives,
        r_occ=float(r_occ),
        source_frame=cloud.frame_id,
        positive_source=idx,
        negative_source=np.repeat(idx, m),
        negative_radius=radius.reshape(-1),
        n_skipped=int((~keep).sum()),
    )


@dataclass
class HeightMap:
    """Per-cell maximum Z; ``values[h, w]`` covers X cell ``h`` and Y cell ``w``."""

    origin_xy: tuple[float, float]
    cell_size: float
    dims: tuple[int, int]
    values: np.ndarray
    valid: np.ndarray
    n_outside: int = 0

    def cell_index(self, points: np.ndarray):
        """``(h, w, inside)`` cell indices for XY positions of ``points``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        h = np.floor((points[:, 0] - self.origin_xy[0]) / self.cell_size).astype(np.int64)
        w = np.floor((points[:, 1] - self.origin_xy[1]) / self.cell_size).astype(np.int64)
        inside = (h >= 0) & (h < self.dims[0]) & (w >= 0) & (w < self.dims[1])
        return h, w, inside


def build_height_map(cloud: PointCloud, origin_xy, cell_size: float, dims) -> HeightMap:
    if not cell_size > 0:
        raise ValueError(f"cell_size must be positive, got {cell_size}")
    H, W = (int(v) for v in dims)
    if H <= 0 or W <= 0:
        raise ValueError(f"dims must be positive, got {dims}")
    hmap = HeightMap((float(origin_xy[0]), float(origin_xy[1])), float(cell_size), (H, W),
                     np.zeros((H, W)), np.zeros((H, W), bool))
    h, w, inside = hmap.cell_index(cloud.points)
    flat = np.full(H * W, -np.inf)
    np.maximum.at(flat, h[inside] * W + w[inside], cloud.points[inside, 2])
    valid = np.isfinite(flat)
    hmap.values = np.where(valid, flat, 0.0).reshape(H, W)
    hmap.valid = valid.reshape(H, W)
    hmap.n_outside = int((~inside).sum())
    return hmap


def height_map_for_grid(cloud: PointCloud, spec: VoxelGridSpec) -> HeightMap:
    """Height map aligned 1:1 with the BEV plane of ``spec``."""
    nx, ny, _ = spec.dims
    if spec.voxel[0] != spec.voxel[1]:
        raise ValueError("BEV-aligned height map needs square XY voxels")
    return build_height_map(cloud, (spec.x_range[0], spec.y_range[0]), spec.voxel[0], (nx, ny))


def query_height_labels(hmap: HeightMap, radar_cloud: PointCloud):
    """Copy LiDAR max-Z into cells hit by radar; the mask also requires LiDAR coverage.

    Unmasked entries hold 0 and must never be read without the mask.
    """
    H, W = hmap.dims
    h, w, inside = hmap.cell_index(radar_cloud.points)
    radar_hit = np.zeros(H * W, bool)
    radar_hit[h[inside] * W + w[inside]] = True
    mask = radar_hit.reshape(H, W) & hmap.valid
    labels = np.where(mask, hmap.values, 0.0)
    return labels, mask


HMAP_MAGIC = b"HMAP"
HMAP_VERSION = 1
_HMAP_HEADER = struct.Struct("<4sIdddII")


def save_height_map(hmap: HeightMap, path) -> None:
    H, W = hmap.dims
    with open(Path(path), "wb") as fh:
        fh.write(_HMAP_HEADER.pack(HMAP_MAGIC, HMAP_VERSION, hmap.origin_xy[0], hmap.origin_xy[1],
                                   hmap.cell_size, H, W))
        values = np.where(hmap.valid, hmap.values, 0.0)
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
        fh.write(np.packbits(hmap.valid.ravel()).tobytes())


def load_height_map(path) -> HeightMap:
    data = Path(path).read_bytes()
    if len(data) < _HMAP_HEADER.size:
        raise ValueError(f"{path}: truncated HMAP header")
    magic, version, ox, oy, cell, H, W = _HMAP_HEADER.unpack_from(data, 0)
    if magic != HMAP_MAGIC or version != HMAP_VERSION:
        raise ValueError(f"{path}: not an HMAP v{HMAP_VERSION} file")
    off = _HMAP_HEADER.size
    values = np.frombuffer(data, "<f4", H * W, off).reshape(H, W).astype(np.float64)
    bits = np.frombuffer(data, np.uint8, offset=off + 4 * H * W)
    valid = np.unpackbits(bits)[: H * W].astype(bool).reshape(H, W)
    return HeightMap((ox, oy), cell, (H, W), values, valid)


def export_height_map_pgm(hmap: HeightMap, path) -> None:
    write_pgm(path, to_gray(hmap.values, hmap.valid))
