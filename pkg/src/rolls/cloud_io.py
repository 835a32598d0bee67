"""Point cloud file readers and writers.

Supported formats:

``ascii-xyz``
    One ``x y z`` triple per line, whitespace separated. Lines starting with
    ``#`` are comments; ``# origin x y z`` carries the sensor origin.
``binary-f32-xyz``
    16-byte little-endian header ``b"RXYZ"``, ``u32`` version (1), ``u64``
    count, then ``count`` packed float32 triples. The sensor origin is not
    stored; it loads as the zero vector.
``pcd-ascii``
    Minimal PCD v0.7 with ``DATA ascii`` and fields ``x y z`` plus optional
    extra scalar fields (e.g. ``intensity``). ``VIEWPOINT`` carries the origin.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud

log = logging.getLogger(__name__)

FORMATS = ("ascii-xyz", "binary-f32-xyz", "pcd-ascii")
BIN_MAGIC = b"RXYZ"
BIN_VERSION = 1
BIN_HEADER = struct.Struct("<4sIQ")


class CloudParseError(ValueError):
    pass


def guess_format(path) -> str:
    suffix = Path(path).suffix.lower()
    if suffix == ".pcd":
        return "pcd-ascii"
    if suffix in (".bin", ".rxyz"):
        return "binary-f32-xyz"
    return "ascii-xyz"


def _drop_nonfinite(points, attributes):
    keep = np.all(np.isfinite(points), axis=1)
    dropped = int(len(points) - keep.sum())
    if dropped:
        points = points[keep]
        attributes = {k: v[keep] for k, v in attributes.items()}
    return points, attributes, dropped


def _parse_ascii_xyz(data: bytes):
    origin = np.zeros(3)
    rows = []
    for lineno, raw in enumerate(data.decode("utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts and parts[0] == "origin":
                try:
                    origin = np.array([float(v) for v in parts[1:4]])
                except ValueError as exc:
                    raise CloudParseError(f"line {lineno}: bad origin comment: {exc}") from None
            continue
        parts = line.split()
        if len(parts) != 3:
            raise CloudParseError(f"line {lineno}: expected 3 values, found {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise CloudParseError(f"line {lineno}: non-numeric token in {line!r}") from None
    points = np.array(rows, dtype=np.float64).reshape(-1, 3)
    return points, origin, {}


def _parse_binary(data: bytes):
    if len(data) < BIN_HEADER.size:
        raise CloudParseError(f"byte 0: truncated header ({len(data)} of {BIN_HEADER.size} bytes)")
    magic, version, count = BIN_HEADER.unpack_from(data, 0)
    if magic != BIN_MAGIC:
        raise CloudParseError(f"byte 0: bad magic {magic!r}, expected {BIN_MAGIC!r}")
    if version != BIN_VERSION:
        raise CloudParseError(f"byte 4: unsupported version {version}")
    need = BIN_HEADER.size + 12 * count
    if len(data) < need:
        raise CloudParseError(
            f"byte {len(data)}: truncated payload, header declares {count} points ({need} bytes)"
        )
    payload = np.frombuffer(data, dtype="<f4", count=3 * count, offset=BIN_HEADER.size)
    return payload.reshape(-1, 3).astype(np.float64), np.zeros(3), {}


def _parse_pcd(data: bytes):
    lines = data.decode("utf-8").splitlines()
    header = {}
    body_start = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        header[key.upper()] = rest.split()
        if key.upper() == "DATA":
            body_start = lineno
            break
    if body_start is None:
        raise CloudParseError(f"line {len(lines)}: PCD header has no DATA line")
    if header["DATA"] != ["ascii"]:
        raise CloudParseError(f"line {body_start}: only 'DATA ascii' is supported")
    fields = header.get("FIELDS")
    if not fields or fields[:3] != ["x", "y", "z"]:
        raise CloudParseError("PCD FIELDS must start with 'x y z'")
    if any(int(c) != 1 for c in header.get("COUNT", ["1"] * len(fields))):
        raise CloudParseError("PCD fields with COUNT > 1 are not supported")
    origin = np.zeros(3)
    if "VIEWPOINT" in header:
        origin = np.array([float(v) for v in header["VIEWPOINT"][:3]])
    n_expected = int(header.get("POINTS", ["-1"])[0])
    rows = []
    for lineno in range(body_start + 1, len(lines) + 1):
        line = lines[lineno - 1].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != len(fields):
            raise CloudParseError(f"line {lineno}: expected {len(fields)} values, found {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise CloudParseError(f"line {lineno}: non-numeric token in {line!r}") from None
    if n_expected >= 0 and len(rows) != n_expected:
        raise CloudParseError(
            f"line {len(lines)}: header declares {n_expected} points, found {len(rows)}"
        )
    table = np.array(rows, dtype=np.float64).reshape(-1, len(fields))
    attrs = {name: table[:, i + 3] for i, name in enumerate(fields[3:])}
    return table[:, :3], origin, attrs


_PARSERS = {
    "ascii-xyz": _parse_ascii_xyz,
    "binary-f32-xyz": _parse_binary,
    "pcd-ascii": _parse_pcd,
}


def load_cloud_with_stats(path, fmt: str | None = None, frame_id: str = "world"):
    """Read a cloud and return ``(cloud, n_dropped)`` where dropped records were non-finite."""
    fmt = fmt or guess_format(path)
    if fmt not in _PARSERS:
        raise ValueError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")
    data = Path(path).read_bytes()
    points, origin, attrs = _PARSERS[fmt](data)
    points, attrs, dropped = _drop_nonfinite(points, attrs)
    if dropped:
        log.warning("%s: dropped %d non-finite records", path, dropped)
    return PointCloud(points, origin, frame_id, attrs), dropped


def load_cloud(path, fmt: str | None = None, frame_id: str = "world") -> PointCloud:
    return load_cloud_with_stats(path, fmt, frame_id)[0]


def save_cloud(cloud: PointCloud, path, fmt: str | None = None) -> None:
    fmt = fmt or guess_format(path)
    path = Path(path)
    try:
        if fmt == "binary-f32-xyz":
            payload = np.ascontiguousarray(cloud.points, dtype="<f4")
            with open(path, "wb") as fh:
                fh.write(BIN_HEADER.pack(BIN_MAGIC, BIN_VERSION, len(cloud)))
                fh.write(payload.tobytes())
        elif fmt == "ascii-xyz":
            with open(path, "w") as fh:
                o = cloud.sensor_origin
                fh.write(f"# origin {o[0]:.6f} {o[1]:.6f} {o[2]:.6f}\n")
                np.savetxt(fh, cloud.points, fmt="%.6f")
        elif fmt == "pcd-ascii":
            names = ["x", "y", "z", *cloud.attributes]
            table = np.column_stack([cloud.points, *cloud.attributes.values()]) if len(names) > 3 else cloud.points
            o = cloud.sensor_origin
            header = [
                "# .PCD v0.7 - Point Cloud Data file format",
                "VERSION 0.7",
                "FIELDS " + " ".join(names),
                "SIZE " + " ".join("8" for _ in names),
                "TYPE " + " ".join("F" for _ in names),
                "COUNT " + " ".join("1" for _ in names),
                f"WIDTH {len(cloud)}",
                "HEIGHT 1",
                f"VIEWPOINT {o[0]:.6f} {o[1]:.6f} {o[2]:.6f} 1 0 0 0",
                f"POINTS {len(cloud)}",
                "DATA ascii",
            ]
            with open(path, "w") as fh:
                fh.write("\n".join(header) + "\n")
                np.savetxt(fh, table.reshape(-1, len(names)), fmt="%.6f")
        else:
            raise ValueError(f"unknown cloud format {fmt!r}; expected one of {FORMATS}")
    except OSError as exc:
        raise OSError(f"cannot write point cloud to {path}: {exc.strerror or exc}") from exc
