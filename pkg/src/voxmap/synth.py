"""Synthetic LiDAR logs of box scenes over a ground plane."""

import json
import logging
import math
from pathlib import Path
from typing import Optional, Union

import numpy as np
from pydantic import BaseModel, Field, TypeAdapter, ValidationError, model_validator

from voxmap.errors import InvalidSpec
from voxmap.ingest import FrameLog, write_log
from voxmap.integrator import Pose, ScanFrame
from voxmap.semantics import LabelSet

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.txt"

Vector = tuple[float, float, float]


class BoxSpec(BaseModel):
    minimum: Vector
    maximum: Vector
    label: int = Field(ge=1, lt=1 << 16)

    @model_validator(mode="after")
    def _check_corners(self) -> "BoxSpec":
        if any(lo >= hi for lo, hi in zip(self.minimum, self.maximum)):
            raise ValueError(f"box minimum {self.minimum} not below maximum {self.maximum}")
        return self


class TrajectorySpec(BaseModel):
    start: Vector = Field(default=(-10.0, 0.0, 1.7), description="Sensor position of the first frame.")
    end: Vector = Field(default=(10.0, 0.0, 1.7), description="Sensor position of the last frame.")


class SensorSpec(BaseModel):
    azimuth_steps: int = Field(default=360, ge=1)
    elevation_steps: int = Field(default=32, ge=1)
    elevation_min: float = Field(default=-25.0, ge=-90.0, le=90.0, description="Degrees.")
    elevation_max: float = Field(default=2.0, ge=-90.0, le=90.0, description="Degrees.")
    max_range: float = Field(default=60.0, gt=0)
    range_noise: float = Field(default=0.0, ge=0, description="Standard deviation in meters.")

    @model_validator(mode="after")
    def _check_elevation(self) -> "SensorSpec":
        if self.elevation_min > self.elevation_max:
            raise ValueError("elevation_min exceeds elevation_max")
        return self

    @property
    def beams(self) -> int:
        return self.azimuth_steps * self.elevation_steps


class NoiseSpec(BaseModel):
    """One corrupted network label slot."""

    error_rate: float = Field(default=0.3, ge=0.0, le=1.0)
    class_error_rates: dict[int, float] = Field(
        default_factory=dict, description="Per-class overrides of error_rate."
    )

    def rates(self, labels: np.ndarray) -> np.ndarray:
        rates = np.full(len(labels), self.error_rate)
        for label, rate in self.class_error_rates.items():
            rates[labels == label] = rate
        return rates


class SceneSpec(BaseModel):
    ground: bool = True
    ground_z: float = 0.0
    ground_label: int = Field(default=40, ge=1, lt=1 << 16)
    boxes: list[BoxSpec] = Field(default_factory=list)
    trajectory: TrajectorySpec = Field(default_factory=TrajectorySpec)
    sensor: SensorSpec = Field(default_factory=SensorSpec)
    networks: list[NoiseSpec] = Field(
        default_factory=lambda: [NoiseSpec()],
        description="Network label slots stored after the ground-truth slot 0.",
    )
    class_names: dict[int, str] = Field(default_factory=dict)
    colors: dict[int, tuple[int, int, int]] = Field(default_factory=dict)

    def classes(self) -> list[int]:
        labels = {box.label for box in self.boxes}
        if self.ground:
            labels.add(self.ground_label)
        return sorted(labels)

    def label_set(self) -> LabelSet:
        names = {label: self.class_names.get(label, f"class{label}") for label in self.classes()}
        return LabelSet(names, tuple(self.classes()))

    def color(self, label: int) -> tuple[int, int, int]:
        if label in self.colors:
            return self.colors[label]
        return ((label * 67) % 256, (label * 131) % 256, (label * 199) % 256)


def city_scene() -> SceneSpec:
    """A street lined with buildings, parked cars and a few pedestrians."""
    boxes = []
    for x in range(-30, 30, 12):
        boxes.append(BoxSpec(minimum=(x, 8.0, 0.0), maximum=(x + 10, 16.0, 12.0), label=50))
        boxes.append(BoxSpec(minimum=(x + 2, -18.0, 0.0), maximum=(x + 11, -9.0, 9.0), label=50))
    for x in (-22.0, -9.0, 4.0, 17.0):
        boxes.append(BoxSpec(minimum=(x, 4.0, 0.0), maximum=(x + 4.5, 5.8, 1.5), label=10))
    for x, y in ((-14.0, -6.0), (2.0, 6.5), (11.0, -5.5)):
        boxes.append(BoxSpec(minimum=(x, y, 0.0), maximum=(x + 0.6, y + 0.6, 1.8), label=30))
    return SceneSpec(
        boxes=boxes,
        class_names={10: "car", 30: "person", 40: "road", 50: "building"},
        colors={10: (245, 150, 100), 30: (30, 30, 255), 40: (255, 0, 255), 50: (0, 200, 255)},
    )


def load_scene(path: Union[str, Path]) -> SceneSpec:
    try:
        return TypeAdapter(SceneSpec).validate_python(json.loads(Path(path).read_text()))
    except (ValidationError, json.JSONDecodeError) as e:
        raise InvalidSpec(f"scene {path}: {e}") from e


def yaw_pose(position: np.ndarray, yaw: float) -> Pose:
    c, s = math.cos(yaw), math.sin(yaw)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), position)


def beam_directions(sensor: SensorSpec, azimuth_offset: float) -> np.ndarray:
    """Unit beam directions in the sensor frame, elevation-major."""
    elevations = np.radians(
        np.linspace(sensor.elevation_min, sensor.elevation_max, sensor.elevation_steps)
    )
    azimuths = azimuth_offset + np.arange(sensor.azimuth_steps) * (2 * np.pi / sensor.azimuth_steps)
    el, az = np.meshgrid(elevations, azimuths, indexing="ij")
    return np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1
    ).reshape(-1, 3)


def cast(scene: SceneSpec, origin: np.ndarray, directions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the first surface along each world direction and its label (inf, 0 on a miss)."""
    count = len(directions)
    distance = np.full(count, np.inf)
    labels = np.zeros(count, dtype=np.uint16)
    if scene.ground:
        dz = directions[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (scene.ground_z - origin[2]) / dz
        hit = (dz < 0) & (t > 0)
        distance[hit] = t[hit]
        labels[hit] = scene.ground_label
    if scene.boxes:
        lower = np.array([box.minimum for box in scene.boxes])[:, None, :]
        upper = np.array([box.maximum for box in scene.boxes])[:, None, :]
        safe = np.where(directions == 0, 1e-300, directions)
        with np.errstate(divide="ignore", over="ignore"):
            t1 = (lower - origin) / safe
            t2 = (upper - origin) / safe
        near = np.minimum(t1, t2).max(axis=2)
        far = np.maximum(t1, t2).min(axis=2)
        near = np.where((near <= far) & (near > 0), near, np.inf)
        nearest = near.argmin(axis=0)
        box_distance = near[nearest, np.arange(count)]
        closer = box_distance < distance
        distance[closer] = box_distance[closer]
        box_labels = np.array([box.label for box in scene.boxes], dtype=np.uint16)
        labels[closer] = box_labels[nearest[closer]]
    return distance, labels


def corrupt(
    truth: np.ndarray, noise: NoiseSpec, classes: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Flip labels with the per-class error rate, always to a different class."""
    flip = rng.random(len(truth)) < noise.rates(truth)
    offset = rng.integers(1, max(len(classes), 2), len(truth))
    if len(classes) < 2:
        return truth.copy()
    index = np.searchsorted(classes, truth)
    flipped = classes[(index + offset) % len(classes)]
    return np.where(flip, flipped, truth).astype(np.uint16)


def synth_frames(scene: SceneSpec, frames: int, seed: int):
    rng = np.random.default_rng(seed)
    classes = np.array(scene.classes(), dtype=np.uint16)
    palette = np.zeros((1 << 16, 3), dtype=np.uint8)
    for label in classes.tolist():
        palette[label] = scene.color(label)
    start = np.array(scene.trajectory.start)
    end = np.array(scene.trajectory.end)
    heading = end - start
    yaw = math.atan2(heading[1], heading[0]) if np.any(heading[:2]) else 0.0
    for index in range(frames):
        fraction = index / (frames - 1) if frames > 1 else 0.0
        pose = yaw_pose(start + fraction * heading, yaw)
        offset = rng.uniform(0.0, 2 * np.pi / scene.sensor.azimuth_steps)
        local = beam_directions(scene.sensor, offset)
        distance, truth = cast(scene, pose.translation, local @ pose.rotation.T)
        if scene.sensor.range_noise > 0:
            distance = distance + rng.normal(0.0, scene.sensor.range_noise, len(distance))
        keep = np.isfinite(distance) & (distance > 0) & (distance <= scene.sensor.max_range)
        truth = truth[keep]
        slots = [truth] + [corrupt(truth, noise, classes, rng) for noise in scene.networks]
        yield ScanFrame(
            index + 1,
            pose,
            local[keep] * distance[keep, None],
            palette[truth],
            np.stack(slots, axis=1),
        )


def synth_log(
    scene: Optional[SceneSpec], frames: int, seed: int, out: Union[str, Path]
) -> FrameLog:
    """Deterministic scans of `scene` along its trajectory: slot 0 holds the ground
    truth, slots 1.. the corrupted network labels."""
    scene = scene if scene is not None else city_scene()
    if frames < 0:
        raise InvalidSpec(f"frame count must not be negative, got {frames}")
    if not scene.classes():
        raise InvalidSpec("scene has neither ground nor boxes")
    for position in (scene.trajectory.start, scene.trajectory.end):
        for box in scene.boxes:
            if all(lo < p < hi for lo, p, hi in zip(box.minimum, position, box.maximum)):
                raise InvalidSpec(f"trajectory point {position} lies inside a box")
    if scene.ground and min(scene.trajectory.start[2], scene.trajectory.end[2]) <= scene.ground_z:
        raise InvalidSpec("trajectory must stay above the ground plane")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / LABELS_FILE).write_text(scene.label_set().dump())
    log = write_log(out, synth_frames(scene, frames, seed), 1 + len(scene.networks), LABELS_FILE)
    logger.debug(f"synthesized {frames} frames of {scene.sensor.beams} beams into {out}")
    return log
