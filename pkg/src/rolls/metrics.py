"""Geometric evaluation: surface extraction, Chamfer / near-field Chamfer, ray depth errors.

Conventions (fixed here and echoed in every report):

* CD is the symmetric mean of *non-squared* Euclidean nearest-neighbour
  distances, ``0.5 * (mean_a min_b |a-b| + mean_b min_a |a-b|)``.
* NFCD is CD after keeping only points within ``R_nf`` of the sensor.
* L2 is the mean absolute ray-depth error, AR the mean of that error divided
  by the ground-truth depth.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .carve import first_hit_depth
from .geometry import PointCloud
from .occupancy import OccupancyGrid

DEFAULT_NEAR_FIELD = 20.0
DEFAULT_THRESHOLD = 0.5
MIN_GT_DEPTH = 1e-6
CD_CONVENTION = "symmetric mean of non-squared nearest-neighbour distances"


class MetricError(ValueError):
    pass


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    return pts.reshape(-1, 3)


def extract_surface(grid: OccupancyGrid, threshold: float = DEFAULT_THRESHOLD) -> PointCloud:
    """Centers of occupied voxels with at least one in-grid face neighbour below threshold.

    Neighbours outside the grid are unobserved and do not make a voxel a
    boundary voxel. Points come out in ``(k, i, j)`` row-major order.
    """
    occ = grid.probs >= threshold
    free = ~occ
    boundary = np.zeros_like(occ)
    for axis in range(3):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        boundary[tuple(lo)] |= free[tuple(hi)]
        boundary[tuple(hi)] |= free[tuple(lo)]
    k, i, j = np.nonzero(occ & boundary)
    return PointCloud(grid.spec.voxel_centers(np.stack([i, j, k], axis=1)))


class NearestNeighborIndex:
    """Exact nearest-neighbour queries (KD-tree), ties resolved to the lowest point index."""

    def __init__(self, points, leafsize: int = 16):
        self.points = _points(points)
        if len(self.points) == 0:
            raise MetricError("cannot build a nearest-neighbour index over an empty point set")
        self.leafsize = leafsize
        self._tree = cKDTree(self.points, leafsize=leafsize)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Return ``(indices, distances)`` for each query point."""
        q = _points(queries)
        dist, idx = self._tree.query(q, k=1)
        idx = np.asarray(idx, dtype=np.int64)
        # re-scan candidates at the same distance so ties pick the lowest index
        ties = self._tree.query_ball_point(q, dist * (1 + 1e-12) + 1e-15)
        for n, cand in enumerate(ties):
            if len(cand) > 1:
                cand = np.asarray(cand)
                dc = np.linalg.norm(self.points[cand] - q[n], axis=1)
                best = cand[dc == dc.min()].min()
                idx[n] = best
                dist[n] = dc.min()
        return idx, np.asarray(dist, dtype=np.float64)


def build_nn_index(points) -> NearestNeighborIndex:
    return NearestNeighborIndex(points)


def query_nn(index: NearestNeighborIndex, q):
    """Nearest stored point to ``q`` and its distance."""
    idx, dist = index.query(np.asarray(q, dtype=np.float64).reshape(1, 3))
    return index.points[idx[0]], float(dist[0])


def _nn_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    return cKDTree(dst).query(src, k=1)[0]


def _stable_mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / len(values)


def chamfer(a, b) -> float:
    a, b = _points(a), _points(b)
    if len(a) == 0 or len(b) == 0:
        raise MetricError(f"chamfer distance undefined for empty set (|A|={len(a)}, |B|={len(b)})")
    return 0.5 * (_stable_mean(_nn_distances(a, b)) + _stable_mean(_nn_distances(b, a)))


def near_field_chamfer(a, b, sensor, r_nf: float = DEFAULT_NEAR_FIELD) -> float:
    if not r_nf > 0:
        raise MetricError(f"near-field radius must be positive, got {r_nf}")
    sensor = np.asarray(sensor, dtype=np.float64).reshape(3)
    a, b = _points(a), _points(b)
    a_nf = a[np.linalg.norm(a - sensor, axis=1) <= r_nf]
    b_nf = b[np.linalg.norm(b - sensor, axis=1) <= r_nf]
    if len(a_nf) == 0 or len(b_nf) == 0:
        raise MetricError(
            f"no points within {r_nf} m of the sensor (|A|={len(a_nf)}, |B|={len(b_nf)})"
        )
    return chamfer(a_nf, b_nf)


@dataclass
class DepthErrors:
    l2: float
    ar: float
    n_rays: int
    n_no_hit: int
    n_too_close: int


def depth_l2_ar(grid: OccupancyGrid, gt_cloud, sensor, threshold: float = DEFAULT_THRESHOLD) -> DepthErrors:
    """Ray-rendered depth error of ``grid`` towards each ground-truth point."""
    gt = _points(gt_cloud)
    sensor = np.asarray(sensor, dtype=np.float64).reshape(3)
    offsets = gt - sensor
    d_gt = np.linalg.norm(offsets, axis=1)
    close = d_gt < MIN_GT_DEPTH
    dirs = offsets[~close] / d_gt[~close, None]
    d_pred, hit = first_hit_depth(grid, sensor, dirs, threshold)
    if not hit.any():
        raise MetricError(f"no evaluable rays: {len(dirs)} rays, none hit an occupied voxel")
    err = np.abs(d_pred[hit] - d_gt[~close][hit])
    return DepthErrors(
        _stable_mean(err), _stable_mean(err / d_gt[~close][hit]),
        int(hit.sum()), int((~hit).sum()), int(close.sum()),
    )


@dataclass
class MetricsReport:
    cd: float
    nfcd: float | None
    l2: float
    ar: float
    counts: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    COLUMNS = ("CD", "NFCD", "AR", "L2")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, label: str = "run") -> str:
        """Fixed-width row in the CD / NFCD / AR / L2 column order."""
        def fmt(v):
            return f"{'-':>8}" if v is None else f"{v:8.3f}"
        head = f"{'Sequence':<16}" + "".join(f"{c:>8}" for c in self.COLUMNS)
        row = f"{label:<16}" + fmt(self.cd) + fmt(self.nfcd) + fmt(self.ar) + fmt(self.l2)
        return head + "\n" + row


REPORT_SCHEMA = {
    "type": "object",
    "required": ["cd", "nfcd", "l2", "ar", "counts", "config"],
    "properties": {
        "cd": {"type": "number", "minimum": 0},
        "nfcd": {"type": ["number", "null"], "minimum": 0},
        "l2": {"type": "number", "minimum": 0},
        "ar": {"type": "number", "minimum": 0},
        "counts": {"type": "object"},
        "config": {"type": "object"},
    },
    "additionalProperties": False,
}


def evaluate(pred: OccupancyGrid, gt_surface, gt_points, sensor, r_nf: float = DEFAULT_NEAR_FIELD,
             threshold: float = DEFAULT_THRESHOLD) -> MetricsReport:
    """Full report: CD/NFCD between the predicted surface and ``gt_surface``, depth errors to ``gt_points``."""
    surf = extract_surface(pred, threshold)
    gt_surface = _points(gt_surface)
    if len(surf) == 0:
        raise MetricError("predicted grid has no surface voxels at threshold "
                          f"{threshold}; chamfer distance is undefined")
    cd = chamfer(surf.points, gt_surface)
    try:
        nfcd = near_field_chamfer(surf.points, gt_surface, sensor, r_nf)
    except MetricError:
        nfcd = None
    depth = depth_l2_ar(pred, gt_points, sensor, threshold)
    return MetricsReport(
        cd=cd, nfcd=nfcd, l2=depth.l2, ar=depth.ar,
        counts={"pred_surface_points": len(surf), "gt_surface_points": len(gt_surface),
                "rays_evaluated": depth.n_rays, "rays_no_hit": depth.n_no_hit,
                "rays_too_close": depth.n_too_close},
        config={"threshold": threshold, "near_field_radius": r_nf, "cd_convention": CD_CONVENTION},
    )
