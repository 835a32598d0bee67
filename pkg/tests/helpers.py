"""Small builders shared by the model and training tests."""

from __future__ import annotations

import numpy as np

from rolls.geometry import PointCloud
from rolls.model import Frame
from rolls.occupancy import FREE, OCCUPIED, UNKNOWN


def toy_frame(config, rng, n_points=8, n_queries=10, frame_id="toy", teacher=False) -> Frame:
    """Random radar points, queries and height labels inside ``config.grid``."""
    spec = config.grid
    nx, ny, nz = spec.dims
    lo, hi = spec.lo + 1e-3, spec.hi - 1e-3
    radar = PointCloud(rng.uniform(lo, hi, (n_points, 3)))
    queries = rng.uniform(lo, hi, (n_queries, 3))
    labels = (rng.random(n_queries) < 0.5).astype(float)
    heights = rng.uniform(spec.z_range[0], spec.z_range[1], (nx, ny))
    mask = rng.random((nx, ny)) < 0.3
    t = None
    if teacher:
        t = rng.choice([UNKNOWN, FREE, OCCUPIED], size=(nz, nx, ny), p=[0.6, 0.3, 0.1]).astype(np.int8)
    return Frame(frame_id, radar, queries, labels, np.where(mask, heights, 0.0), mask, t)
