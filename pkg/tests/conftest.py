import numpy as np
import pytest

from voxmap.config import MapConfig
from voxmap.synth import BoxSpec, NoiseSpec, SceneSpec, SensorSpec, TrajectorySpec, synth_log


@pytest.fixture
def anyio_backend():
    return "asyncio"


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240917)


@pytest.fixture
def grid_config() -> MapConfig:
    # unit voxels, 16 cells per axis centered on the origin
    return MapConfig(resolution=1.0, depth_levels=4)


@pytest.fixture
def street_config() -> MapConfig:
    return MapConfig(resolution=0.4, depth_levels=10)


def small_sensor() -> SensorSpec:
    return SensorSpec(
        azimuth_steps=120, elevation_steps=12, elevation_min=-30.0, elevation_max=10.0, max_range=30.0
    )


@pytest.fixture
def ground_scene() -> SceneSpec:
    return SceneSpec(
        sensor=small_sensor(),
        networks=[NoiseSpec(error_rate=0.0)],
        class_names={40: "road"},
    )


@pytest.fixture
def box_scene() -> SceneSpec:
    # boxes float above the ground so no voxel mixes two classes
    return SceneSpec(
        boxes=[
            BoxSpec(minimum=(-4.0, 3.0, 1.2), maximum=(-1.0, 5.0, 3.0), label=10),
            BoxSpec(minimum=(2.0, -6.0, 1.2), maximum=(4.0, -3.0, 2.8), label=20),
            BoxSpec(minimum=(6.0, 3.0, 1.6), maximum=(8.0, 4.5, 3.2), label=30),
        ],
        trajectory=TrajectorySpec(start=(-6.0, 0.0, 1.7), end=(6.0, 0.0, 1.7)),
        sensor=small_sensor(),
        networks=[NoiseSpec(error_rate=0.3), NoiseSpec(error_rate=0.3)],
        class_names={10: "car", 20: "person", 30: "sign", 40: "road"},
    )


@pytest.fixture
def box_log(tmp_path, box_scene):
    return synth_log(box_scene, 8, seed=7, out=tmp_path / "boxes")
