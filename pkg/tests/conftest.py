import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from rolls.model import ModelConfig  # noqa: E402
from rolls.pipeline import SensorSetup  # noqa: E402
from rolls.tpv import VoxelGridSpec  # noqa: E402

# Desk-scale fixture: 8 frames, 200 stage-1 iterations. The stage-1 rate is
# raised from the library default so 200 iterations make real progress.
FIXTURE_FRAMES = 8
FIXTURE_SEED = 0
FIXTURE_LR_STAGE1 = 3e-3

SMALL_SPEC = VoxelGridSpec((0.0, 6.4), (-3.2, 3.2), (-1.2, 1.2), (0.4, 0.4, 0.4))


def fixture_config(**kw) -> ModelConfig:
    return ModelConfig(lr_stage1=FIXTURE_LR_STAGE1, seed=FIXTURE_SEED, **kw)


def small_config(**kw) -> ModelConfig:
    base = dict(channels=4, mlp_widths=(3, 4, 4), fusion_hidden=4, head_hidden=4, grid=SMALL_SPEC,
                max_queries_per_frame=64)
    base.update(kw)
    return ModelConfig(**base)


SMALL_SENSORS = SensorSetup(lidar_azimuth=48, lidar_elevation=8, radar_azimuth=24, radar_elevation=6,
                            max_range=12.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting --------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running training or oracle sweeps")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    number, title = marker.args
    detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        _ACCEPTANCE[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        line = f"[{status}] criterion {number:2d}: {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
