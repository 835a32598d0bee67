"""Run configuration: model, grid, sensors and radar noise in one validated JSON document."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .pipeline import SensorSetup
from .synth import NOISE_PRESETS, RadarNoiseModel

SEED_ENV = "ROLLS_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: RadarNoiseModel = NOISE_PRESETS["clean"]
    sensors: SensorSetup = field(default_factory=SensorSetup)
    frames: int = 8

    @property
    def seed(self) -> int:
        return self.model.seed

    def validate(self) -> RunConfig:
        self.model.validate()
        if self.frames < 1:
            raise ConfigError(f"frames must be >= 1, got {self.frames}")
        s = self.sensors
        if min(s.lidar_azimuth, s.lidar_elevation, s.radar_azimuth, s.radar_elevation) < 1:
            raise ConfigError("sensor resolutions must be >= 1")
        if not s.max_range > 0:
            raise ConfigError("sensor max_range must be positive")
        return self

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "noise": self.noise.to_dict(),
                "sensors": self.sensors.to_dict(), "frames": self.frames}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        unknown = set(d) - {"model", "noise", "sensors", "frames"}
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        try:
            model = ModelConfig.from_dict(dict(d.get("model", {})))
            noise = d.get("noise", "clean")
            if isinstance(noise, str):
                if noise not in NOISE_PRESETS:
                    raise ConfigError(f"unknown noise preset {noise!r}; expected one of {sorted(NOISE_PRESETS)}")
                noise = replace(NOISE_PRESETS[noise], seed=model.seed)
            else:
                noise = RadarNoiseModel(**{"seed": model.seed, **noise})
            sensor_keys = {f.name for f in fields(SensorSetup)}
            raw = dict(d.get("sensors", {}))
            if set(raw) - sensor_keys:
                raise ConfigError(f"unknown sensor keys: {sorted(set(raw) - sensor_keys)}")
            sensors = SensorSetup(**{k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()})
            cfg = cls(model, noise, sensors, int(d.get("frames", 8)))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def load_run_config(path=None, overrides: dict | None = None, env=None) -> RunConfig:
    """File values, then ``ROLLS_SEED``, then explicit flag overrides (flag wins).

    ``overrides`` maps dotted keys such as ``"model.lr_stage1"`` to values;
    ``None`` values are ignored.
    """
    env = os.environ if env is None else env
    data: dict = {}
    if path is not None:
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
    data = json.loads(json.dumps(data))
    if env.get(SEED_ENV):
        try:
            data.setdefault("model", {})["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key == "noise" and isinstance(value, str):
            data["noise"] = value
            continue
        node = data
        *parents, leaf = key.split(".")
        for part in parents:
            if isinstance(node.get(part), str):
                node[part] = NOISE_PRESETS[node[part]].to_dict()
            node = node.setdefault(part, {})
        node[leaf] = value
    return RunConfig.from_dict(data)
