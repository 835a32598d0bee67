"""Dense occupancy grids over a :class:`VoxelGridSpec`."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tpv import VoxelGridSpec

PROVENANCES = ("predicted", "teacher-ray-carved", "ground-truth")

UNKNOWN, FREE, OCCUPIED = 0, 1, 2


@dataclass
class OccupancyGrid:
    """Probabilities indexed ``probs[k, i, j]`` for Z cell ``k``, X cell ``i``, Y cell ``j``.

    Boolean grids (teacher, ground truth) store 0/1. ``known`` marks cells
    that carry a label; ``None`` means every cell is known.
    """

    spec: VoxelGridSpec
    probs: np.ndarray
    provenance: str = "predicted"
    known: np.ndarray | None = None

    def __post_init__(self):
        nx, ny, nz = self.spec.dims
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.shape != (nz, nx, ny):
            raise ValueError(f"grid shape {self.probs.shape} does not match spec dims {(nz, nx, ny)}")
        if self.probs.size and (self.probs.min() < 0 or self.probs.max() > 1):
            raise ValueError("occupancy probabilities must lie in [0, 1]")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.known is not None:
            self.known = np.asarray(self.known, dtype=bool)
            if self.known.shape != self.probs.shape:
                raise ValueError("known mask shape mismatch")

    @property
    def shape(self):
        return self.probs.shape

    def occupied(self, threshold: float = 0.5) -> np.ndarray:
        return self.probs >= threshold

    def labels(self) -> np.ndarray:
        """Tri-state ``UNKNOWN`` / ``FREE`` / ``OCCUPIED`` codes."""
        out = np.where(self.probs >= 0.5, OCCUPIED, FREE).astype(np.int8)
        if self.known is not None:
            out[~self.known] = UNKNOWN
        return out

    @classmethod
    def from_labels(cls, spec, labels, provenance="teacher-ray-carved") -> OccupancyGrid:
        labels = np.asarray(labels)
        return cls(spec, (labels == OCCUPIED).astype(np.float64), provenance, labels != UNKNOWN)

    def cells_to_index(self, cells: np.ndarray):
        """``(k, i, j)`` index tuple for ``M x 3`` (x, y, z) cell coordinates."""
        cells = np.asarray(cells)
        return cells[:, 2], cells[:, 0], cells[:, 1]


OCCG_MAGIC = b"OCCG"
OCCG_VERSION = 1
_OCCG_HEADER = struct.Struct("<4sIII9d")


def save_grid(grid: OccupancyGrid, path) -> None:
    s = grid.spec
    has_known = grid.known is not None
    with open(Path(path), "wb") as fh:
        fh.write(_OCCG_HEADER.pack(OCCG_MAGIC, OCCG_VERSION, PROVENANCES.index(grid.provenance),
                                   int(has_known), *s.x_range, *s.y_range, *s.z_range, *s.voxel))
        fh.write(np.ascontiguousarray(grid.probs, "<f4").tobytes())
        if has_known:
            fh.write(np.packbits(grid.known.ravel()).tobytes())


def load_grid(path) -> OccupancyGrid:
    data = Path(path).read_bytes()
    if len(data) < _OCCG_HEADER.size:
        raise ValueError(f"{path}: truncated OCCG header")
    magic, version, prov, has_known, *vals = _OCCG_HEADER.unpack_from(data, 0)
    if magic != OCCG_MAGIC or version != OCCG_VERSION:
        raise ValueError(f"{path}: not an OCCG v{OCCG_VERSION} file")
    spec = VoxelGridSpec(tuple(vals[0:2]), tuple(vals[2:4]), tuple(vals[4:6]), tuple(vals[6:9]))
    nx, ny, nz = spec.dims
    n = nx * ny * nz
    off = _OCCG_HEADER.size
    probs = np.frombuffer(data, "<f4", n, off).reshape(nz, nx, ny).astype(np.float64)
    known = None
    if has_known:
        bits = np.frombuffer(data, np.uint8, offset=off + 4 * n)
        known = np.unpackbits(bits)[:n].astype(bool).reshape(nz, nx, ny)
    return OccupancyGrid(spec, np.clip(probs, 0.0, 1.0), PROVENANCES[prov], known)
