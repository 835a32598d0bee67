"""A small reverse-mode gradient engine over float64 numpy arrays.

Only the operations the occupancy network needs are provided. Every op
records its parents and a closure that pushes the output gradient back to
them; ``Tensor.backward`` replays those closures in reverse topological
order. Gradients accumulate (``+=``) so a tensor used twice receives the sum.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

MAX_RANK = 4

_mode = threading.local()


@contextmanager
def no_grad():
    """Build no graph inside this block (per thread)."""
    prev = getattr(_mode, "off", False)
    _mode.off = True
    try:
        yield
    finally:
        _mode.off = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        data = np.array(data, dtype=np.float64)
        if data.ndim > MAX_RANK:
            raise ValueError(f"rank {data.ndim} exceeds supported rank {MAX_RANK}")
        self.data = data
        self.grad = np.zeros_like(data) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        for t in order:
            if t._parents and t.grad is None:
                t.grad = np.zeros_like(t.data)
        self.grad = self.grad + grad
        for t in reversed(order):
            if t._backward is not None:
                t._backward(t.grad)
        # release intermediate buffers; leaves keep theirs
        for t in order:
            if t._parents:
                t.grad = None
                t._parents = ()
                t._backward = None

    # operator sugar for the handful of elementwise ops
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    """A trainable leaf tensor with its AdamW moment buffers."""

    __slots__ = ("name", "m", "v", "step")

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    live = () if getattr(_mode, "off", False) else tuple(p for p in parents if p.requires_grad)
    out.requires_grad = bool(live)
    out._parents = live if live else ()
    out._backward = backward if live else None
    return out


def _acc(t: Tensor, g):
    if t.requires_grad:
        t.grad += g


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "add")

    def backward(g):
        _acc(a, g)
        _acc(b, g)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")

    def backward(g):
        _acc(a, g)
        _acc(b, -g)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")

    def backward(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        _acc(a, g * s)

    return _result(a.data * s, (a,), backward)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    on = x.data > 0

    def backward(g):
        _acc(x, g * on)

    return _result(np.where(on, x.data, 0.0), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)

    def backward(g):
        _acc(x, g * y * (1.0 - y))

    return _result(y, (x,), backward)


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- reductions ------------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    def backward(g):
        _acc(x, np.broadcast_to(g, x.shape))

    return _result(np.array(x.data.sum()), (x,), backward)


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        _acc(x, np.broadcast_to(g / n, x.shape))

    return _result(np.array(x.data.sum() / n), (x,), backward)


def weighted_total(terms, weights) -> Tensor:
    """``sum_i weights[i] * terms[i]`` for scalar tensors."""
    terms = [_as_tensor(t) for t in terms]
    weights = [float(w) for w in weights]
    total = sum(w * float(t.data) for w, t in zip(weights, terms))

    def backward(g):
        for w, t in zip(weights, terms):
            _acc(t, g * w)

    return _result(np.array(total), terms, backward)


# -- shape -----------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    def backward(g):
        _acc(x, g.reshape(x.shape))

    return _result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def backward(g):
        _acc(x, g.transpose(inv))

    return _result(x.data.transpose(axes), (x,), backward)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for x, part in zip(xs, np.split(g, splits, axis=axis)):
            _acc(x, part)

    return _result(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _result(x.data[idx], (x,), backward)


# -- layers ----------------------------------------------------------------------


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``y = x @ W + b`` for ``x: N x Cin``, ``W: Cin x Cout``, ``b: Cout``."""
    if x.data.ndim != 2 or W.data.ndim != 2 or x.shape[1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(
            f"linear: incompatible shapes x{x.shape} @ W{W.shape} + b{b.shape}"
        )

    def backward(g):
        _acc(x, g @ W.data.T)
        _acc(W, x.data.T @ g)
        _acc(b, g.sum(axis=0))

    return _result(x.data @ W.data + b.data, (x, W, b), backward)


def conv1x1(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Per-pixel channel mixing: ``x: B x C x H x W``, ``W: Cout x C``, ``b: Cout``."""
    if x.data.ndim != 4 or W.data.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"conv1x1: incompatible shapes x{x.shape}, W{W.shape}, b{b.shape}")
    B, C, H, Wd = x.shape
    flat = x.data.reshape(B, C, H * Wd)
    y = np.einsum("oc,bcp->bop", W.data, flat) + b.data[None, :, None]

    def backward(g):
        gf = g.reshape(B, -1, H * Wd)
        _acc(x, np.einsum("oc,bop->bcp", W.data, gf).reshape(x.shape))
        _acc(W, np.einsum("bop,bcp->oc", gf, flat))
        _acc(b, gf.sum(axis=(0, 2)))

    return _result(y.reshape(B, -1, H, Wd), (x, W, b), backward)


def segment_max(x: Tensor, segments, n_segments: int, fill: float = 0.0) -> Tensor:
    """Max of the rows of ``x`` (N x C) within each segment; empty segments hold ``fill``.

    The gradient of each output entry goes to the winning row; ties go to the
    lowest row index.
    """
    segments = np.asarray(segments, dtype=np.int64)
    N, C = x.shape
    out = np.full((n_segments, C), -np.inf)
    if N:
        np.maximum.at(out, segments, x.data)
    empty = np.isneginf(out)
    out[empty] = fill
    win = np.full((n_segments, C), N, dtype=np.int64)
    if N:
        rows = np.where(x.data == out[segments], np.arange(N)[:, None], N)
        np.minimum.at(win, segments, rows)
    has = win < N

    def backward(g):
        if x.requires_grad and N:
            seg_idx, ch_idx = np.nonzero(has)
            np.add.at(x.grad, (win[seg_idx, ch_idx], ch_idx), g[seg_idx, ch_idx])

    return _result(out, (x,), backward)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling over the last two axes; odd edges form partial windows."""
    *lead, A, B = x.shape
    A2, B2 = -(-A // 2), -(-B // 2)
    padded = np.full((*lead, 2 * A2, 2 * B2), -np.inf)
    padded[..., :A, :B] = x.data
    win = padded.reshape(*lead, A2, 2, B2, 2).swapaxes(-3, -2).reshape(*lead, A2, B2, 4)
    arg = win.argmax(axis=-1)  # first max in row-major window order = lowest linear index
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        if not x.requires_grad:
            return
        gw = np.zeros(win.shape)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gp = gw.reshape(*lead, A2, B2, 2, 2).swapaxes(-3, -2).reshape(*lead, 2 * A2, 2 * B2)
        x.grad += gp[..., :A, :B]

    return _result(out, (x,), backward)


def upsample2x(x: Tensor, size) -> Tensor:
    """Nearest-neighbour 2x upsampling over the last two axes, cropped to ``size``."""
    A, B = size
    *lead, a, b = x.shape
    if not (2 * a >= A > 2 * (a - 1) and 2 * b >= B > 2 * (b - 1)):
        raise ValueError(f"upsample2x: cannot map {(a, b)} to {(A, B)}")
    up = np.repeat(np.repeat(x.data, 2, axis=-2), 2, axis=-1)[..., :A, :B]

    def backward(g):
        if not x.requires_grad:
            return
        gp = np.zeros((*lead, 2 * a, 2 * b))
        gp[..., :A, :B] = g
        x.grad += gp.reshape(*lead, a, 2, b, 2).sum(axis=(-3, -1))

    return _result(up, (x,), backward)


def bilinear_weights(coords: np.ndarray, size):
    """Corner indices and weights for bilinear lookup at continuous pixel coordinates.

    Pixel ``(i, j)`` is centred at coordinate ``(i, j)``; coordinates are
    clamped to the plane so border queries replicate the edge.
    """
    coords = np.asarray(coords, dtype=np.float64)
    A, B = size
    u = np.clip(coords[:, 0], 0.0, A - 1)
    v = np.clip(coords[:, 1], 0.0, B - 1)
    i0 = np.minimum(np.floor(u).astype(np.int64), max(A - 2, 0))
    j0 = np.minimum(np.floor(v).astype(np.int64), max(B - 2, 0))
    i1 = np.minimum(i0 + 1, A - 1)
    j1 = np.minimum(j0 + 1, B - 1)
    fu, fv = u - i0, v - j0
    idx = np.stack([i0 * B + j0, i0 * B + j1, i1 * B + j0, i1 * B + j1])
    w = np.stack([(1 - fu) * (1 - fv), (1 - fu) * fv, fu * (1 - fv), fu * fv])
    return idx, w


def bilinear_sample(plane: Tensor, coords) -> Tensor:
    """Sample a ``C x A x B`` plane at ``Q`` continuous coordinates -> ``Q x C``."""
    C, A, B = plane.shape
    idx, w = bilinear_weights(coords, (A, B))
    flat = plane.data.reshape(C, A * B)
    out = np.zeros((len(w[0]), C))
    for k in range(4):
        out += w[k][:, None] * flat[:, idx[k]].T

    def backward(g):
        if not plane.requires_grad:
            return
        gflat = np.zeros(A * B * C)
        chan = np.arange(C)
        for k in range(4):
            keys = (idx[k][:, None] * C + chan).ravel()
            gflat += np.bincount(keys, (w[k][:, None] * g).ravel(), A * B * C)
        plane.grad += gflat.reshape(A * B, C).T.reshape(C, A, B)

    return _result(out, (plane,), backward)


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        _acc(x, y * (g - (g * y).sum(axis=-1, keepdims=True)))

    return _result(y, (x,), backward)


def weighted_sum(parts, weights: Tensor) -> Tensor:
    """``out[q] = sum_k weights[q, k] * parts[k][q]`` for ``K`` tensors of shape ``Q x C``."""
    parts = [_as_tensor(p) for p in parts]
    if weights.shape != (parts[0].shape[0], len(parts)):
        raise ValueError(f"weighted_sum: weights {weights.shape} vs {len(parts)} parts")
    out = sum(weights.data[:, k, None] * p.data for k, p in enumerate(parts))

    def backward(g):
        for k, p in enumerate(parts):
            _acc(p, weights.data[:, k, None] * g)
        if weights.requires_grad:
            weights.grad += np.stack([(g * p.data).sum(axis=1) for p in parts], axis=1)

    return _result(out, (*parts, weights), backward)


def weighted_depth_sum(stack: Tensor, weights: Tensor) -> Tensor:
    """``out[p, c] = sum_d weights[p, d] * stack[p, d, c]``."""
    if stack.data.ndim != 3 or weights.shape != stack.shape[:2]:
        raise ValueError(f"weighted_depth_sum: stack {stack.shape} vs weights {weights.shape}")
    out = np.einsum("pd,pdc->pc", weights.data, stack.data)

    def backward(g):
        _acc(stack, weights.data[:, :, None] * g[:, None, :])
        _acc(weights, np.einsum("pc,pdc->pd", g, stack.data))

    return _result(out, (stack, weights), backward)


# -- losses ----------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean binary cross-entropy, stable for large ``|z|``.

    Uses ``max(z, 0) - z*y + log(1 + exp(-|z|))``. With ``weights`` the mean
    is ``sum(w * l) / sum(w)``.
    """
    z = logits.data
    y = np.asarray(targets, dtype=np.float64).reshape(z.shape)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=np.float64).reshape(z.shape)
    total = w.sum()
    if z.size == 0 or total == 0:
        return _result(np.array(0.0), (logits,), lambda g: None)
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    value = (w * per).sum() / total

    def backward(g):
        _acc(logits, g * w * (_sigmoid(z) - y) / total)

    return _result(np.array(value), (logits,), backward)


def masked_mse(pred: Tensor, target, mask) -> Tensor:
    """``sum(M * (pred - target)^2) / sum(M)``; 0 with zero gradient when the mask is empty."""
    target = np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ValueError(f"masked_mse: shapes {pred.shape}, {target.shape}, {mask.shape}")
    n = int(mask.sum())
    if n == 0:
        return _result(np.array(0.0), (pred,), lambda g: None)
    # the sentinel under M = 0 never enters the arithmetic
    diff = np.where(mask, pred.data - np.where(mask, target, 0.0), 0.0)
    value = (diff * diff).sum() / n

    def backward(g):
        _acc(pred, g * 2.0 * diff / n)

    return _result(np.array(value), (pred,), backward)


# -- verification ----------------------------------------------------------------


def grad_check(fn, x: Tensor, eps: float = 1e-5) -> float:
    """Largest ``|a - n| / max(1, |a|, |n|)`` between reverse-mode and central differences.

    ``fn`` maps ``x`` to a scalar tensor and may close over other tensors.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    if not x.requires_grad:
        raise ValueError("grad_check needs a tensor with requires_grad=True")
    x.zero_grad()
    out = fn(x)
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    out.backward()
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    numeric = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn(x).data)
        flat[i] = orig - eps
        fm = float(fn(x).data)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"grad_check: non-finite value at coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)
    a = analytic.reshape(-1)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(numeric)))
    return float((np.abs(a - numeric) / denom).max()) if a.size else 0.0
