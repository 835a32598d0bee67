"""The radar occupancy network.

Pipeline: point-wise MLP -> voxel max -> three TPV planes -> per-plane
encoder/decoder -> plane sampling + fusion -> occupancy logit per query.
Two auxiliary height heads (on the encoder BEV plane and the decoded BEV
plane) are trained against LiDAR height labels but never feed the occupancy
branch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .geometry import PointCloud
from .tpv import TpvFeatures, VoxelGridSpec, assign_voxels, plane_index

PLANES = ("bev", "fv", "sv")


@dataclass
class ModelConfig:
    channels: int = 16
    mlp_widths: tuple[int, ...] = (3, 16, 16)
    decoder_depth: int = 2
    decoder_skip: bool = True
    fusion_hidden: int = 16
    head_hidden: int = 16
    loss_weights: tuple[float, float, float] = (0.1, 0.1, 1.0)
    r_occ: float = 0.2
    negatives_per_point: int = 2
    negative_law: str = "mixed"
    max_queries_per_frame: int = 4096
    lr_stage1: float = 4e-4
    lr_stage2: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    iterations_stage1: int = 200
    iterations_stage2: int = 100
    batch_size: int = 2
    batch_size_stage2: int = 2
    stage2_cells_per_frame: int = 0
    seed: int = 0
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)

    def __post_init__(self):
        self.mlp_widths = tuple(int(w) for w in self.mlp_widths)
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        self.betas = tuple(float(b) for b in self.betas)
        if isinstance(self.grid, dict):
            self.grid = VoxelGridSpec.from_dict(self.grid)
        self.validate()

    def validate(self):
        if any(w < 0 for w in self.loss_weights) or len(self.loss_weights) != 3:
            raise ValueError(f"loss_weights must be three non-negative numbers, got {self.loss_weights}")
        if not (self.lr_stage1 > 0 and self.lr_stage2 > 0):
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.mlp_widths[0] != 3 or self.mlp_widths[-1] != self.channels or len(self.mlp_widths) < 2:
            raise ValueError(
                f"mlp_widths {self.mlp_widths} must start at 3 and end at channels={self.channels}"
            )
        if self.decoder_depth < 1:
            raise ValueError("decoder_depth must be >= 1")
        if self.batch_size < 1 or self.batch_size_stage2 < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.r_occ <= 0:
            raise ValueError("r_occ must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        d["mlp_widths"] = list(self.mlp_widths)
        d["loss_weights"] = list(self.loss_weights)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def _uniform(rng, shape, fan_in, gain):
    bound = np.sqrt(gain / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class OccupancyModel:
    """Parameters plus the forward computations; all math runs through :mod:`autodiff`."""

    def __init__(self, config: ModelConfig | None = None, params: dict | None = None):
        self.config = config or ModelConfig()
        self.spec = self.config.grid
        self.params: dict[str, Parameter] = params if params is not None else self._init_params()

    def _init_params(self) -> dict[str, Parameter]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        C = cfg.channels
        params = {}

        def add(name, arr):
            params[name] = Parameter(arr, name)

        widths = cfg.mlp_widths
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            add(f"enc.mlp{i}.W", _uniform(rng, (a, b), a, 6.0))
            add(f"enc.mlp{i}.b", np.zeros(b))
        add("height1.W", _uniform(rng, (1, C), C, 3.0))
        add("height1.b", np.zeros(1))
        for plane in PLANES:
            for lvl in range(cfg.decoder_depth):
                add(f"dec.{plane}.enc{lvl}.W", _uniform(rng, (C, C), C, 6.0))
                add(f"dec.{plane}.enc{lvl}.b", np.zeros(C))
            for lvl in range(cfg.decoder_depth - 1):
                add(f"dec.{plane}.up{lvl}.W", _uniform(rng, (C, C), C, 6.0))
                add(f"dec.{plane}.up{lvl}.b", np.zeros(C))
        add("height2.W", _uniform(rng, (1, C), C, 3.0))
        add("height2.b", np.zeros(1))
        F = cfg.fusion_hidden
        add("occ.fuse0.W", _uniform(rng, (3 * C, F), 3 * C, 6.0))
        add("occ.fuse0.b", np.zeros(F))
        add("occ.fuse1.W", _uniform(rng, (F, 3), F, 3.0))
        add("occ.fuse1.b", np.zeros(3))
        Hh = cfg.head_hidden
        add("occ.mlp0.W", _uniform(rng, (C, Hh), C, 6.0))
        add("occ.mlp0.b", np.zeros(Hh))
        add("occ.mlp1.W", _uniform(rng, (Hh, 1), Hh, 3.0))
        add("occ.mlp1.b", np.zeros(1))
        return params

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def __getitem__(self, name) -> Parameter:
        return self.params[name]

    # -- encoder ---------------------------------------------------------------

    def point_inputs(self, points: np.ndarray) -> np.ndarray:
        """Per-point MLP input: coordinates scaled to ``[0, 1)`` over the grid."""
        return (np.asarray(points, dtype=np.float64) - self.spec.lo) / (self.spec.hi - self.spec.lo)

    def encode(self, points: np.ndarray):
        """Return ``(planes, bev_mask, n_dropped)`` with planes as tensors ``C x A x B``."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        spec, C = self.spec, self.config.channels
        nx, ny, nz = spec.dims
        cells, point_voxel, kept = assign_voxels(points, spec)
        h = Tensor(self.point_inputs(points[kept]))
        n_layers = len(self.config.mlp_widths) - 1
        for i in range(n_layers):
            # final ReLU keeps features >= 0, matching the empty-cell fill of 0
            h = ad.relu(ad.linear(h, self.params[f"enc.mlp{i}.W"], self.params[f"enc.mlp{i}.b"]))
        vox = ad.segment_max(h, point_voxel, len(cells))
        bev_idx, fv_idx, sv_idx = plane_index(cells, spec)
        planes = {}
        for name, idx, (a, b) in (
            ("bev", bev_idx, (nx, ny)), ("fv", fv_idx, (ny, nz)), ("sv", sv_idx, (nx, nz))
        ):
            flat = ad.segment_max(vox, idx, a * b)
            planes[name] = ad.transpose(ad.reshape(flat, (a, b, C)), (2, 0, 1))
        mask = np.zeros(nx * ny, bool)
        mask[bev_idx] = True
        return planes, mask.reshape(nx, ny), int((~kept).sum())

    # -- heads -----------------------------------------------------------------

    def height(self, f_bev: Tensor, which: int) -> Tensor:
        """``relu(conv1x1(f_bev))`` as an ``H x W`` map (``which`` = 1 encoder, 2 decoder)."""
        C, H, W = f_bev.shape
        x = ad.reshape(f_bev, (1, C, H, W))
        y = ad.conv1x1(x, self.params[f"height{which}.W"], self.params[f"height{which}.b"])
        return ad.reshape(ad.relu(y), (H, W))

    def decode_plane(self, plane: Tensor, name: str) -> Tensor:
        C, A, B = plane.shape
        depth = self.config.decoder_depth

        def block(x, key):
            c, a, b = x.shape
            y = ad.conv1x1(ad.reshape(x, (1, c, a, b)), self.params[key + ".W"], self.params[key + ".b"])
            return ad.reshape(ad.relu(y), (c, a, b))

        skips = [block(plane, f"dec.{name}.enc0")]
        for lvl in range(1, depth):
            skips.append(block(ad.maxpool2x2(skips[-1]), f"dec.{name}.enc{lvl}"))
        y = skips[-1]
        for lvl in range(depth - 2, -1, -1):
            up = ad.upsample2x(y, skips[lvl].shape[1:])
            if self.config.decoder_skip:
                up = ad.add(up, skips[lvl])
            y = block(up, f"dec.{name}.up{lvl}")
        return y

    def decode(self, planes: dict):
        decoded = {name: self.decode_plane(planes[name], name) for name in PLANES}
        return decoded, self.height(decoded["bev"], 2)

    def query_coords(self, queries: np.ndarray):
        """Continuous pixel coordinates of each query on the BEV, FV and SV planes."""
        u = (np.asarray(queries, dtype=np.float64) - self.spec.lo) / self.spec.voxel_size - 0.5
        return {"bev": u[:, [0, 1]], "fv": u[:, [1, 2]], "sv": u[:, [0, 2]]}

    def inside(self, queries: np.ndarray) -> np.ndarray:
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        return np.all((queries >= self.spec.lo) & (queries < self.spec.hi), axis=1)

    def fused_features(self, planes: dict, queries: np.ndarray):
        """Sampled plane features fused with softmax weights -> ``(fused, weights, samples)``."""
        coords = self.query_coords(queries)
        samples = [ad.bilinear_sample(planes[n], coords[n]) for n in PLANES]
        h = ad.relu(ad.linear(ad.concat(samples, axis=1), self["occ.fuse0.W"], self["occ.fuse0.b"]))
        weights = ad.softmax(ad.linear(h, self["occ.fuse1.W"], self["occ.fuse1.b"]))
        return ad.weighted_sum(samples, weights), weights, samples

    def occupancy_logits(self, planes: dict, queries: np.ndarray) -> Tensor:
        """Logit per query; callers must pass queries inside the grid."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if len(queries) == 0:
            return Tensor(np.zeros(0))
        fused, _, _ = self.fused_features(planes, queries)
        h = ad.relu(ad.linear(fused, self["occ.mlp0.W"], self["occ.mlp0.b"]))
        out = ad.linear(h, self["occ.mlp1.W"], self["occ.mlp1.b"])
        return ad.reshape(out, (len(queries),))

    def forward(self, points: np.ndarray, queries: np.ndarray | None = None):
        planes, mask, _ = self.encode(points)
        h1 = self.height(planes["bev"], 1)
        decoded, h2 = self.decode(planes)
        logits = None if queries is None else self.occupancy_logits(decoded, queries)
        return {"planes": planes, "bev_mask": mask, "h1": h1, "decoded": decoded, "h2": h2,
                "logits": logits}


def tpv_from_planes(planes: dict, mask: np.ndarray) -> TpvFeatures:
    return TpvFeatures(planes["bev"].data.copy(), planes["fv"].data.copy(),
                       planes["sv"].data.copy(), mask.copy())


def encode_points(model: OccupancyModel, radar: PointCloud) -> TpvFeatures:
    with ad.no_grad():
        planes, mask, _ = model.encode(radar.points)
    return tpv_from_planes(planes, mask)


def height_head(model: OccupancyModel, f_bev, which: int = 1) -> np.ndarray:
    with ad.no_grad():
        return model.height(Tensor(f_bev), which).data


def dense_decode(model: OccupancyModel, tpv: TpvFeatures):
    """Decoded TPV planes plus the decoder-level height prediction."""
    planes = {"bev": Tensor(tpv.f_bev), "fv": Tensor(tpv.f_fv), "sv": Tensor(tpv.f_sv)}
    with ad.no_grad():
        decoded, h2 = model.decode(planes)
    return tpv_from_planes(decoded, tpv.occupancy_mask_bev), h2.data


def occupancy_head(model: OccupancyModel, tpv: TpvFeatures, queries: np.ndarray):
    """Logits for in-grid queries; returns ``(logits, inside_mask)``, outside queries counted out."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    inside = model.inside(queries)
    planes = {"bev": Tensor(tpv.f_bev), "fv": Tensor(tpv.f_fv), "sv": Tensor(tpv.f_sv)}
    with ad.no_grad():
        logits = model.occupancy_logits(planes, queries[inside]).data
    return logits, inside


# -- losses --------------------------------------------------------------------


def masked_height_loss(h_pred: Tensor, labels, mask) -> Tensor:
    return ad.masked_mse(h_pred, labels, mask)


def occupancy_query_loss(logits: Tensor, labels) -> Tensor:
    return ad.bce_with_logits(logits, labels)


@dataclass
class Frame:
    """One training sample: radar input plus LiDAR-derived targets, all in the grid frame."""

    frame_id: str
    radar: PointCloud
    query_points: np.ndarray
    query_labels: np.ndarray
    height_labels: np.ndarray
    height_mask: np.ndarray
    teacher: np.ndarray | None = None


def height_targets(labels: np.ndarray, mask: np.ndarray, spec: VoxelGridSpec) -> np.ndarray:
    """Heights above the grid floor; the ReLU head can only emit non-negative values."""
    return np.where(mask, labels - spec.z_range[0], 0.0)


def stage1_loss(frame: Frame, model: OccupancyModel, weights=None):
    """Weighted sum of encoder height, decoder height and occupancy-query losses.

    Returns ``(total, components)`` where ``components`` holds the three
    unweighted scalar tensors.
    """
    w = model.config.loss_weights if weights is None else tuple(weights)
    inside = model.inside(frame.query_points)
    out = model.forward(frame.radar.points, frame.query_points[inside])
    target = height_targets(frame.height_labels, frame.height_mask, model.spec)
    l1 = masked_height_loss(out["h1"], target, frame.height_mask)
    l2 = masked_height_loss(out["h2"], target, frame.height_mask)
    locc = occupancy_query_loss(out["logits"], frame.query_labels[inside])
    return ad.weighted_total([l1, l2, locc], w), {"l1": l1, "l2": l2, "occ": locc}


# -- downstream ----------------------------------------------------------------


def init_bev_pool_params(channels: int, hidden: int = 16, seed: int = 0, zero: bool = False):
    rng = np.random.default_rng(seed)
    if zero:
        W0, W1 = np.zeros((channels, hidden)), np.zeros((hidden, 1))
    else:
        W0 = _uniform(rng, (channels, hidden), channels, 6.0)
        W1 = _uniform(rng, (hidden, 1), hidden, 3.0)
    return {
        "pool.mlp0.W": Parameter(W0, "pool.mlp0.W"),
        "pool.mlp0.b": Parameter(np.zeros(hidden), "pool.mlp0.b"),
        "pool.mlp1.W": Parameter(W1, "pool.mlp1.W"),
        "pool.mlp1.b": Parameter(np.zeros(1), "pool.mlp1.b"),
    }


def bev_feature_pool(features, params) -> Tensor:
    """Attention-style pooling of a ``C x D x H x W`` feature stack down to ``C x H x W``.

    An MLP scores each of the ``D`` features in a pillar, the scores are
    softmax-normalised over depth and the features summed with those weights.
    """
    features = features if isinstance(features, Tensor) else Tensor(features)
    if features.data.ndim != 4:
        raise ValueError(f"bev_feature_pool expects C x D x H x W, got {features.shape}")
    C, D, H, W = features.shape
    if params["pool.mlp0.W"].shape[0] != C:
        raise ValueError(f"pool MLP expects {params['pool.mlp0.W'].shape[0]} channels, got {C}")
    stack = ad.reshape(ad.transpose(features, (2, 3, 1, 0)), (H * W * D, C))
    h = ad.relu(ad.linear(stack, params["pool.mlp0.W"], params["pool.mlp0.b"]))
    scores = ad.reshape(ad.linear(h, params["pool.mlp1.W"], params["pool.mlp1.b"]), (H * W, D))
    weights = ad.softmax(scores)
    pooled = ad.weighted_depth_sum(ad.reshape(stack, (H * W, D, C)), weights)
    return ad.transpose(ad.reshape(pooled, (H, W, C)), (2, 0, 1))
