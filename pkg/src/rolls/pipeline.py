"""Synthetic frame generation and label assembly shared by the CLI and the tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .carve import carve_labels
from .geometry import PointCloud, RigidTransform
from .labels import (
    HeightMap,
    OccupancyQuerySet,
    generate_occupancy_queries,
    height_map_for_grid,
    query_height_labels,
)
from .model import Frame, ModelConfig
from .occupancy import OccupancyGrid
from .synth import (
    CLEAN_RADAR,
    RadarNoiseModel,
    SceneSpec,
    ground_truth_occupancy,
    random_scene,
    raycast_rays,
    scan_rays,
    simulate_radar,
)
from .tpv import VoxelGridSpec


@dataclass
class SensorSetup:
    lidar_azimuth: int = 360
    lidar_elevation: int = 32
    radar_azimuth: int = 128
    radar_elevation: int = 16
    max_range: float = 70.0
    fov_azimuth: tuple[float, float] = (-80.0, 80.0)
    fov_elevation: tuple[float, float] = (-25.0, 10.0)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}


@dataclass
class SynthFrame:
    frame_id: str
    scene: SceneSpec
    lidar: PointCloud
    radar: PointCloud
    gt: OccupancyGrid


def synthesize_frame(scene: SceneSpec, spec: VoxelGridSpec, sensors: SensorSetup,
                     noise: RadarNoiseModel, frame_index: int, frame_id: str | None = None,
                     pose: RigidTransform | None = None) -> SynthFrame:
    pose = pose or RigidTransform.identity()
    fov = {"fov_azimuth": sensors.fov_azimuth, "fov_elevation": sensors.fov_elevation}
    lidar_rays = scan_rays(pose, sensors.lidar_azimuth, sensors.lidar_elevation, sensors.max_range, **fov)
    radar_rays = scan_rays(pose, sensors.radar_azimuth, sensors.radar_elevation, sensors.max_range, **fov)
    return SynthFrame(
        frame_id or f"frame_{frame_index:03d}",
        scene,
        raycast_rays(scene, lidar_rays),
        simulate_radar(scene, radar_rays, noise, frame_index),
        ground_truth_occupancy(scene, spec),
    )


def synthesize_dataset(n_frames: int, seed: int, spec: VoxelGridSpec | None = None,
                       sensors: SensorSetup | None = None,
                       noise: RadarNoiseModel = CLEAN_RADAR) -> list[SynthFrame]:
    spec = spec or VoxelGridSpec()
    sensors = sensors or SensorSetup()
    return [
        synthesize_frame(random_scene(seed * 1000 + i, spec), spec, sensors, noise, i)
        for i in range(n_frames)
    ]


def make_labels(lidar: PointCloud, radar: PointCloud, config: ModelConfig, frame_index: int = 0,
                with_teacher: bool = True):
    """LiDAR-derived supervision for one frame: query set, height map and carved teacher labels."""
    queries = generate_occupancy_queries(
        lidar, config.r_occ, config.negatives_per_point,
        np.random.SeedSequence([config.seed, frame_index, 1]), config.negative_law,
    )
    hmap = height_map_for_grid(lidar, config.grid)
    teacher = carve_labels(config.grid, lidar.sensor_origin, lidar.points) if with_teacher else None
    return queries, hmap, teacher


def frame_from_labels(frame_id: str, radar: PointCloud, queries: OccupancyQuerySet, hmap: HeightMap,
                      teacher, config: ModelConfig, frame_index: int = 0) -> Frame:
    """Keep in-grid queries, subsample to the per-frame cap and look up radar height labels."""
    spec = config.grid
    pts, labels = queries.points_and_labels()
    inside = np.all((pts >= spec.lo) & (pts < spec.hi), axis=1)
    pts, labels = pts[inside], labels[inside]
    cap = config.max_queries_per_frame
    if cap and len(pts) > cap:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, frame_index, 2]))
        pick = np.sort(rng.choice(len(pts), cap, replace=False))
        pts, labels = pts[pick], labels[pick]
    h_labels, h_mask = query_height_labels(hmap, radar)
    return Frame(frame_id, radar, pts, labels, h_labels, h_mask, teacher)


def build_frame(frame_id: str, lidar: PointCloud, radar: PointCloud, config: ModelConfig,
                frame_index: int = 0, with_teacher: bool = True) -> Frame:
    """Turn a LiDAR/radar pair into supervision: queries, height labels and the carved teacher."""
    queries, hmap, teacher = make_labels(lidar, radar, config, frame_index, with_teacher)
    return frame_from_labels(frame_id, radar, queries, hmap, teacher, config, frame_index)


def frames_from_synth(synth: list[SynthFrame], config: ModelConfig) -> list[Frame]:
    return [build_frame(s.frame_id, s.lidar, s.radar, config, i) for i, s in enumerate(synth)]
