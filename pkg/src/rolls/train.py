"""Stage-1 training, stage-2 fine-tuning against the carved LiDAR teacher, and inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import PointCloud
from .model import Frame, ModelConfig, OccupancyModel, stage1_loss
from .occupancy import FREE, OCCUPIED, OccupancyGrid
from .optim import AdamW, CheckpointError, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

FORMAT_TAG = "rolls-occupancy-model/1"
INFER_CHUNK = 32768


class TrainingError(RuntimeError):
    pass


@dataclass
class History:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def column(self, key) -> np.ndarray:
        return np.array([r[key] for r in self.rows])

    def write_csv(self, path) -> None:
        keys = ["iteration", "l1", "l2", "occ", "total"]
        with open(path, "w") as fh:
            fh.write(",".join(keys) + "\n")
            for r in self.rows:
                fh.write(",".join(repr(r.get(k, float("nan"))) for k in keys) + "\n")


def _batches(n_frames: int, batch_size: int, iterations: int, seed: int):
    """Seeded shuffled order, re-shuffled every pass over the data."""
    rng = np.random.default_rng(seed)
    order: list[int] = []
    for _ in range(iterations):
        batch = []
        while len(batch) < batch_size:
            if not order:
                order = list(rng.permutation(n_frames))
            batch.append(int(order.pop(0)))
        yield batch


def train_stage1(frames: list[Frame], config: ModelConfig, model: OccupancyModel | None = None,
                 iterations: int | None = None):
    """Optimise the weighted height + occupancy-query loss; returns ``(model, history)``."""
    if not frames:
        raise TrainingError("train_stage1 needs at least one frame")
    model = model or OccupancyModel(config)
    iterations = config.iterations_stage1 if iterations is None else iterations
    opt = AdamW(model.parameters(), config.lr_stage1, config.betas, config.eps, config.weight_decay)
    history = History()
    for it, batch in enumerate(_batches(len(frames), config.batch_size, iterations, config.seed)):
        opt.zero_grad()
        sums = {"l1": 0.0, "l2": 0.0, "occ": 0.0, "total": 0.0}
        for fi in batch:
            total, parts = stage1_loss(frames[fi], model)
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite stage-1 loss on frame {frames[fi].frame_id!r}")
            ad.scale(total, 1.0 / len(batch)).backward()
            for k, t in parts.items():
                sums[k] += float(t.data) / len(batch)
            sums["total"] += value / len(batch)
        opt.step()
        history.append(iteration=it, **sums)
    return model, history


def dataset_loss(model: OccupancyModel, frames: list[Frame]) -> dict:
    """Mean stage-1 loss components over ``frames`` without building a graph."""
    acc = {"l1": 0.0, "l2": 0.0, "occ": 0.0, "total": 0.0}
    with ad.no_grad():
        for f in frames:
            total, parts = stage1_loss(f, model)
            acc["total"] += float(total.data) / len(frames)
            for k, t in parts.items():
                acc[k] += float(t.data) / len(frames)
    return acc


def teacher_targets(frame: Frame, spec, cap: int = 0, seed: int = 0):
    """Voxel centers with a FREE/OCCUPIED teacher label and their 0/1 targets."""
    labels = frame.teacher
    k, i, j = np.nonzero((labels == FREE) | (labels == OCCUPIED))
    if cap and len(k) > cap:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(k), cap, replace=False))
        k, i, j = k[pick], i[pick], j[pick]
    centers = spec.voxel_centers(np.stack([i, j, k], axis=1))
    return centers, (labels[k, i, j] == OCCUPIED).astype(np.float64)


def stage2_loss(frame: Frame, model: OccupancyModel, cap: int = 0, seed: int = 0):
    centers, targets = teacher_targets(frame, model.spec, cap, seed)
    planes, _, _ = model.encode(frame.radar.points)
    decoded, _ = model.decode(planes)
    logits = model.occupancy_logits(decoded, centers)
    return ad.bce_with_logits(logits, targets)


def finetune_stage2(model: OccupancyModel, frames: list[Frame], config: ModelConfig | None = None,
                    iterations: int | None = None):
    """Continue training at the stage-2 rate with BCE against the carved teacher labels.

    UNKNOWN cells contribute nothing. Returns ``(model, history)``.
    """
    config = config or model.config
    if not frames:
        raise TrainingError("finetune_stage2 needs at least one frame")
    if any(f.teacher is None for f in frames):
        raise TrainingError("every stage-2 frame needs teacher labels")
    iterations = config.iterations_stage2 if iterations is None else iterations
    opt = AdamW(model.parameters(), config.lr_stage2, config.betas, config.eps, config.weight_decay)
    history = History()
    batches = _batches(len(frames), config.batch_size_stage2, iterations, config.seed + 1)
    for it, batch in enumerate(batches):
        opt.zero_grad()
        total = 0.0
        for fi in batch:
            loss = stage2_loss(frames[fi], model, config.stage2_cells_per_frame,
                               seed=config.seed * 100003 + it)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite stage-2 loss on frame {frames[fi].frame_id!r}")
            if loss.requires_grad:
                ad.scale(loss, 1.0 / len(batch)).backward()
            total += value / len(batch)
        opt.step()
        history.append(iteration=it, occ=total, total=total)
    return model, history


def predict_logits(model: OccupancyModel, radar_points: np.ndarray, queries: np.ndarray,
                   chunk: int = INFER_CHUNK) -> np.ndarray:
    with ad.no_grad():
        planes, _, _ = model.encode(radar_points)
        decoded, _ = model.decode(planes)
        parts = [model.occupancy_logits(decoded, queries[s : s + chunk]).data
                 for s in range(0, len(queries), chunk)]
    return np.concatenate(parts) if parts else np.zeros(0)


def infer_occupancy(model: OccupancyModel, radar: PointCloud) -> OccupancyGrid:
    """Occupancy probability at every voxel center, shaped ``(nz, nx, ny)``."""
    spec = model.spec
    nx, ny, nz = spec.dims
    logits = predict_logits(model, radar.points, spec.all_centers())
    return OccupancyGrid(spec, ad._sigmoid(logits).reshape(nz, nx, ny), "predicted")


# -- checkpoints -----------------------------------------------------------------


def save_model(model: OccupancyModel, path, extra: dict | None = None) -> None:
    meta = {"format": FORMAT_TAG, **(extra or {})}
    save_checkpoint(path, model.parameters(), model.config.to_dict(), True, meta)


def load_model(path) -> OccupancyModel:
    params, config, extra = load_checkpoint(path)
    if extra.get("format") != FORMAT_TAG:
        raise CheckpointError(
            f"{path}: checkpoint format {extra.get('format')!r} is not {FORMAT_TAG!r}"
        )
    cfg = ModelConfig.from_dict(config)
    reference = OccupancyModel(cfg)
    by_name = {p.name: p for p in params}
    for name, p in reference.params.items():
        if name not in by_name or by_name[name].shape != p.shape:
            raise CheckpointError(f"{path}: parameter {name!r} missing or mis-shaped for this config")
    return OccupancyModel(cfg, {name: by_name[name] for name in reference.params})
