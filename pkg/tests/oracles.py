"""Slow, obviously-correct reference implementations used to check the library."""

from __future__ import annotations

import math

import numpy as np

from rolls.occupancy import FREE, OCCUPIED, UNKNOWN


def height_map_brute(points, origin_xy, cell, dims):
    """Per-cell max Z by scanning every cell against every point."""
    H, W = dims
    values = np.zeros((H, W))
    valid = np.zeros((H, W), bool)
    ch = np.floor((points[:, 0] - origin_xy[0]) / cell)
    cw = np.floor((points[:, 1] - origin_xy[1]) / cell)
    for h in range(H):
        for w in range(W):
            sel = (ch == h) & (cw == w)
            if sel.any():
                values[h, w] = points[sel, 2].max()
                valid[h, w] = True
    return values, valid


def dense_scatter_max(points, features, spec):
    """Dense ``(nx, ny, nz, C)`` grid of per-voxel feature maxima, ``-inf`` where empty."""
    nx, ny, nz = spec.dims
    C = features.shape[1]
    grid = np.full((nx, ny, nz, C), -np.inf)
    for p, f in zip(points, features):
        c = np.floor((p - spec.lo) / spec.voxel_size).astype(int)
        if np.all(c >= 0) and np.all(c < (nx, ny, nz)):
            grid[c[0], c[1], c[2]] = np.maximum(grid[c[0], c[1], c[2]], f)
    return grid


def conv1x1_pixels(x, W, b):
    B, C, H, Wd = x.shape
    out = np.zeros((B, W.shape[0], H, Wd))
    for n in range(B):
        for i in range(H):
            for j in range(Wd):
                for o in range(W.shape[0]):
                    out[n, o, i, j] = sum(W[o, c] * x[n, c, i, j] for c in range(C)) + b[o]
    return out


def bilinear_pixel(plane, u, v):
    """Bilinear lookup with pixel centres at integer coordinates, clamped to the plane."""
    C, A, B = plane.shape
    u = min(max(u, 0.0), A - 1)
    v = min(max(v, 0.0), B - 1)
    i0, j0 = min(int(math.floor(u)), max(A - 2, 0)), min(int(math.floor(v)), max(B - 2, 0))
    i1, j1 = min(i0 + 1, A - 1), min(j0 + 1, B - 1)
    fu, fv = u - i0, v - j0
    return ((1 - fu) * (1 - fv) * plane[:, i0, j0] + (1 - fu) * fv * plane[:, i0, j1]
            + fu * (1 - fv) * plane[:, i1, j0] + fu * fv * plane[:, i1, j1])


def bce_direct(z, y):
    s = 1.0 / (1.0 + np.exp(-z))
    return float(np.mean(-(y * np.log(s) + (1 - y) * np.log(1 - s))))


def chamfer_brute(a, b):
    d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def nn_linear(points, q):
    """Index and distance of the nearest point; ties go to the lowest index."""
    d = np.sqrt(((points - q) ** 2).sum(axis=1))
    i = int(np.flatnonzero(d == d.min())[0])
    return i, float(d[i])


def boundary_scan(probs, threshold=0.5):
    """Occupied voxels with a free in-grid face neighbour, visited cell by cell."""
    nz, nx, ny = probs.shape
    out = []
    for k in range(nz):
        for i in range(nx):
            for j in range(ny):
                if probs[k, i, j] < threshold:
                    continue
                for dk, di, dj in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                    kk, ii, jj = k + dk, i + di, j + dj
                    if 0 <= kk < nz and 0 <= ii < nx and 0 <= jj < ny and probs[kk, ii, jj] < threshold:
                        out.append((i, j, k))
                        break
    return np.array(out, dtype=np.int64).reshape(-1, 3)


# -- ray marching ----------------------------------------------------------------


def _cells_at(spec, o, d, t):
    return np.floor((o + np.multiply.outer(t, d) - spec.lo) / spec.voxel_size).astype(np.int64)


def _refine(spec, o, d, ta, tb, ca, cb, out, depth=0):
    """Cells strictly between samples ``ta`` and ``tb`` when they differ in more than one step.

    Bisection isolates each boundary crossing; crossings closer than 1e-13 in
    ray parameter are ordered X before Y before Z.
    """
    if np.abs(cb - ca).sum() <= 1:
        return
    if tb - ta < 1e-13 or depth > 60:
        c = ca.copy()
        for ax in range(3):
            if cb[ax] != c[ax]:
                c[ax] = cb[ax]
                if not np.array_equal(c, cb):
                    out.append(c.copy())
        return
    tm = 0.5 * (ta + tb)
    cm = _cells_at(spec, o, d, np.array([tm]))[0]
    _refine(spec, o, d, ta, tm, ca, cm, out, depth + 1)
    if not (np.array_equal(cm, ca) or np.array_equal(cm, cb)):
        out.append(cm)
    _refine(spec, o, d, tm, tb, cm, cb, out, depth + 1)


def march_ray_cells(spec, origin, point, step=0.01):
    """Ordered in-grid cells visited by the segment origin -> point, sampled every ``step`` meters."""
    o = np.asarray(origin, float)
    d = np.asarray(point, float) - o
    length = float(np.linalg.norm(d))
    n = max(1, int(math.ceil(length / step)))
    t = np.linspace(0.0, 1.0, n + 1)
    cells = _cells_at(spec, o, d, t)
    change = np.flatnonzero(np.any(cells[1:] != cells[:-1], axis=1))
    seq = [cells[0]]
    for c in change:
        extra: list = []
        _refine(spec, o, d, t[c], t[c + 1], cells[c], cells[c + 1], extra)
        seq.extend(extra)
        seq.append(cells[c + 1])
    seq = np.array(seq)
    return seq[spec.in_bounds(seq)]


def carve_oracle(spec, sensor, points, step=0.01):
    nx, ny, nz = spec.dims
    labels = np.full((nz, nx, ny), UNKNOWN, dtype=np.int8)
    ends = []
    for p in points:
        cells = march_ray_cells(spec, sensor, p, step)
        labels[cells[:, 2], cells[:, 0], cells[:, 1]] = FREE
        ends.append(np.floor((p - spec.lo) / spec.voxel_size).astype(np.int64))
    if ends:
        ends = np.array(ends)
        ends = ends[spec.in_bounds(ends)]
        labels[ends[:, 2], ends[:, 0], ends[:, 1]] = OCCUPIED
    return labels


def carve_oracle_fast(spec, sensor, points, step=0.01, chunk=256):
    """Same labels as :func:`carve_oracle`, sampling many rays at once.

    Only sample pairs that jump more than one cell fall back to bisection.
    """
    nx, ny, nz = spec.dims
    labels = np.full((nz, nx, ny), UNKNOWN, dtype=np.int8)
    points = np.asarray(points, float).reshape(-1, 3)
    sensor = np.asarray(sensor, float)
    dims = np.array(spec.dims)
    free_keys = []
    for s in range(0, len(points), chunk):
        p = points[s : s + chunk]
        d = p - sensor
        length = np.linalg.norm(d, axis=1)
        n = np.maximum(1, np.ceil(length / step).astype(int))
        m = int(n.max())
        frac = np.minimum(np.arange(m + 1)[None, :] / n[:, None], 1.0)  # rays x samples
        pts = sensor + frac[..., None] * d[:, None, :]
        cells = np.floor((pts - spec.lo) / spec.voxel_size).astype(np.int64)
        inb = np.all((cells >= 0) & (cells < dims), axis=-1)
        keys = ((cells[..., 0] * ny + cells[..., 1]) * nz + cells[..., 2])[inb]
        free_keys.append(np.unique(keys))
        jump = np.abs(np.diff(cells, axis=1)).sum(-1) > 1
        for r, c in zip(*np.nonzero(jump)):
            extra: list = []
            _refine(spec, sensor, d[r], frac[r, c], frac[r, c + 1], cells[r, c], cells[r, c + 1], extra)
            if extra:
                e = np.array(extra)
                e = e[spec.in_bounds(e)]
                free_keys.append((e[:, 0] * ny + e[:, 1]) * nz + e[:, 2])
    if free_keys:
        keys = np.unique(np.concatenate(free_keys))
        labels[keys % nz, keys // (ny * nz), (keys // nz) % ny] = FREE
    ends = np.floor((points - spec.lo) / spec.voxel_size).astype(np.int64)
    ends = ends[spec.in_bounds(ends)]
    labels[ends[:, 2], ends[:, 0], ends[:, 1]] = OCCUPIED
    return labels


def march_first_hit(probs, spec, sensor, direction, threshold=0.5, step=0.005):
    """Distance to the first sample inside a cell with ``prob >= threshold``; ``nan`` if none."""
    nz, nx, ny = probs.shape
    # far enough to cross the whole box from the sensor
    t_far = float(np.linalg.norm(np.maximum(np.abs(spec.hi - sensor), np.abs(spec.lo - sensor))))
    t = np.arange(0.0, t_far + step, step)
    cells = _cells_at(spec, np.asarray(sensor, float), np.asarray(direction, float), t)
    inb = spec.in_bounds(cells)
    hit = np.zeros(len(t), bool)
    c = cells[inb]
    hit[inb] = probs[c[:, 2], c[:, 0], c[:, 1]] >= threshold
    idx = np.flatnonzero(hit)
    return float(t[idx[0]]) if len(idx) else float("nan")
