"""Binary PGM (P5) output for quick visual inspection of 2D maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_gray(values: np.ndarray, valid: np.ndarray | None = None, lo=None, hi=None) -> np.ndarray:
    """Linearly map ``values`` onto 0..255; invalid cells become 0."""
    values = np.asarray(values, dtype=np.float64)
    sel = np.ones(values.shape, bool) if valid is None else np.asarray(valid, bool)
    if not sel.any():
        return np.zeros(values.shape, np.uint8)
    lo = values[sel].min() if lo is None else lo
    hi = values[sel].max() if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    gray = np.clip((values - lo) * scale, 0, 255)
    gray = np.where(sel, np.rint(gray), 0)
    if scale == 0.0:
        gray = np.where(sel, 255, 0)
    return gray.astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {image.shape}")
    h, w = image.shape
    with open(Path(path), "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1).reshape(h, w)
