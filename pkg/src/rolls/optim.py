"""AdamW with decoupled weight decay, and the binary checkpoint format."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Parameter


class AdamW:
    def __init__(self, params, lr=4e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        if not lr > 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, grads=None):
        """Apply one update using ``p.grad`` (or the matching entry of ``grads``)."""
        if grads is None:
            grads = [p.grad for p in self.params]
        adamw_step(self.params, grads, self.lr, *self.betas, self.eps, self.weight_decay)


def adamw_step(params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
    for p, g in zip(params, grads):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")
    for p, g in zip(params, grads):
        p.step += 1
        # decoupled decay acts on the pre-update weights
        p.data -= lr * weight_decay * p.data
        p.m = beta1 * p.m + (1 - beta1) * g
        p.v = beta2 * p.v + (1 - beta2) * g * g
        m_hat = p.m / (1 - beta1**p.step)
        v_hat = p.v / (1 - beta2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


CKPT_MAGIC = b"ROLL"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, config: dict | None = None, with_moments: bool = True,
                    extra: dict | None = None) -> None:
    """Write named float64 tensors, an optional JSON config section and optimizer moments.

    Layout (little-endian): magic, u32 version, u32 flags, u64 json length,
    json bytes, u32 param count, then per parameter: u16 name length, name,
    u32 ndim, u64 dims, f64 payload, and when flag bit 0 is set, u64 step and
    the first/second moment payloads.
    """
    meta = json.dumps({"config": config or {}, "extra": extra or {}}, sort_keys=True).encode()
    flags = 1 if with_moments else 0
    with open(Path(path), "wb") as fh:
        fh.write(struct.pack("<4sIIQ", CKPT_MAGIC, CKPT_VERSION, flags, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<H", len(name)) + name)
            fh.write(struct.pack("<I", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}Q", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, "<f8").tobytes())
            if with_moments:
                fh.write(struct.pack("<Q", p.step))
                fh.write(np.ascontiguousarray(p.m, "<f8").tobytes())
                fh.write(np.ascontiguousarray(p.v, "<f8").tobytes())


def load_checkpoint(path):
    """Return ``(params, config, extra)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if len(data) < 20:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    magic, version, flags, meta_len = struct.unpack_from("<4sIIQ", data, 0)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {version} is not supported (expected {CKPT_VERSION})"
        )
    off = 20
    meta = json.loads(data[off : off + meta_len])
    off += meta_len
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, off)
        off += 8 * ndim
        n = int(np.prod(shape))
        arr = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
        off += 8 * n
        p = Parameter(arr, name)
        if flags & 1:
            (p.step,) = struct.unpack_from("<Q", data, off)
            off += 8
            p.m = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
            p.v = np.frombuffer(data, "<f8", n, off).reshape(shape).copy()
            off += 8 * n
        params.append(p)
    return params, meta["config"], meta["extra"]
