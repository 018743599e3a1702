import dataclasses
import logging
import time
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from voxmap import morton
from voxmap.config import IntegratorConfig, MapConfig
from voxmap.errors import OutOfBounds, PoseInvalid, UnknownSlot
from voxmap.octree import (
    U32_MAX,
    Color,
    NodeCode,
    OccupancyMap,
    OccupancyState,
    Point,
    code_from_point,
    leaf_indices,
)

logger = logging.getLogger(__name__)

# rays traversed per vectorized batch
RAY_BATCH = 4096


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid sensor-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(rotation).all() and np.isfinite(translation).all()):
            raise PoseInvalid("pose contains non-finite values")
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=1e-6):
            raise PoseInvalid("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > 1e-6:
            raise PoseInvalid("rotation determinant is not +1")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_values(cls, values: Sequence[float]) -> "Pose":
        """Row-major 3x4 matrix [R | t]."""
        matrix = np.asarray(values, dtype=np.float64).reshape(3, 4)
        return cls(matrix[:, :3], matrix[:, 3])

    def to_values(self) -> list[float]:
        return np.hstack([self.rotation, self.translation[:, None]]).ravel().tolist()

    def transform(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse_transform(self, points: np.ndarray) -> np.ndarray:
        return (points - self.translation) @ self.rotation


@dataclass
class PointRecord:
    position: Point
    color: Color
    labels: tuple[int, ...]


@dataclass(eq=False)
class ScanFrame:
    """One posed, colored, multi-label point cloud stored column-wise."""

    timestep: int
    pose: Pose
    positions: np.ndarray
    colors: np.ndarray
    labels: np.ndarray
    # label slots integrate_frame counts per point, None for the default
    integrate_slots: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if not 0 <= self.timestep <= U32_MAX:
            raise OutOfBounds(f"timestep {self.timestep} does not fit in 32 bits")
        self.positions = np.asarray(self.positions, dtype=np.float32).reshape(-1, 3)
        count = len(self.positions)
        self.colors = np.asarray(self.colors, dtype=np.uint8).reshape(count, 3)
        labels = np.asarray(self.labels, dtype=np.uint16)
        if labels.ndim != 2:
            labels = labels.reshape(count, -1) if count else labels.reshape(0, 0)
        self.labels = labels

    @classmethod
    def empty(cls, timestep: int, pose: Pose, slot_count: int = 0) -> "ScanFrame":
        return cls(
            timestep,
            pose,
            np.zeros((0, 3), np.float32),
            np.zeros((0, 3), np.uint8),
            np.zeros((0, slot_count), np.uint16),
        )

    @classmethod
    def from_records(
        cls, timestep: int, pose: Pose, records: Sequence[PointRecord], slot_count: int
    ) -> "ScanFrame":
        if not records:
            return cls.empty(timestep, pose, slot_count)
        return cls(
            timestep,
            pose,
            np.array([r.position for r in records], dtype=np.float32),
            np.array([r.color for r in records], dtype=np.uint8),
            np.array([r.labels for r in records], dtype=np.uint16).reshape(
                len(records), slot_count
            ),
        )

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def slot_count(self) -> int:
        return self.labels.shape[1]

    @property
    def points(self) -> list[PointRecord]:
        return [
            PointRecord(
                tuple(map(float, p)),  # type: ignore[arg-type]
                tuple(map(int, c)),  # type: ignore[arg-type]
                tuple(map(int, ls)),
            )
            for p, c, ls in zip(self.positions, self.colors, self.labels)
        ]

    def world_points(self) -> np.ndarray:
        return self.pose.transform(self.positions.astype(np.float64))

    def with_slots(self, slots: Iterable[int]) -> "ScanFrame":
        slots = tuple(slots)
        check_slots(slots, self.slot_count)
        return dataclasses.replace(self, integrate_slots=slots)


@dataclass
class IntegrationStats:
    timestep: int
    points: int
    hits: int
    misses: int
    duration: float


def check_slots(slots: Sequence[int], slot_count: int):
    for slot in slots:
        if not 0 <= slot < slot_count:
            raise UnknownSlot(f"label slot {slot} not in [0, {slot_count})")


def inverse_sensor_logodds(is_hit: bool, config: MapConfig) -> float:
    return config.hit_logodds if is_hit else config.miss_logodds


def traverse(
    config: MapConfig, origins: np.ndarray, endpoints: np.ndarray, depth: int
) -> tuple[np.ndarray, np.ndarray]:
    """Grid cells at `depth` crossed by the open segments origins[i] -> endpoints[i].

    Returns (ray ids, cell indices) grouped by ray and ordered by distance from the
    origin, without the cell containing each endpoint. Boundary crossings at equal
    parameters are taken as a single diagonal step (half-open cells).
    """
    count = len(origins)
    scale = config.resolution * (1 << depth)
    g0 = np.asarray(origins, dtype=np.float64) / scale
    g1 = np.asarray(endpoints, dtype=np.float64) / scale
    delta = g1 - g0
    positive = delta > 0
    negative = delta < 0
    first = np.where(negative, np.ceil(g0) - 1, np.floor(g0))
    last = np.where(positive, np.ceil(g1) - 1, np.where(negative, np.floor(g1), first))
    crossings = np.abs(last - first).astype(np.int64).ravel()
    total = int(crossings.sum())

    owner = np.repeat(np.arange(crossings.size), crossings)
    starts = np.cumsum(crossings) - crossings
    step_number = np.arange(total) - np.repeat(starts, crossings) + 1
    ray = owner // 3
    axis = owner % 3
    axis_delta = delta[ray, axis]
    axis_first = first[ray, axis]
    boundary = np.where(axis_delta > 0, axis_first + step_number, axis_first - step_number + 1)
    t = (boundary - g0[ray, axis]) / axis_delta

    order = np.lexsort((axis, t, ray))
    ray, axis, t = ray[order], axis[order], t[order]
    steps = np.zeros((total, 3), dtype=np.int64)
    steps[np.arange(total), axis] = np.sign(axis_delta[order]).astype(np.int64)
    cumulative = np.vstack([np.zeros((1, 3), np.int64), np.cumsum(steps, axis=0)])
    per_ray = np.bincount(ray, minlength=count)
    group_start = np.cumsum(per_ray) - per_ray
    cells = first.astype(np.int64)[ray] + cumulative[1:] - cumulative[group_start[ray]]
    keep = np.ones(total, dtype=bool)
    keep[:-1] = ~((ray[1:] == ray[:-1]) & (t[1:] == t[:-1]))

    all_rays = np.concatenate([np.arange(count), ray[keep]])
    all_cells = np.concatenate([first.astype(np.int64), cells[keep]])
    order = np.argsort(all_rays, kind="stable")
    all_rays, all_cells = all_rays[order], all_cells[order]

    is_last = np.ones(len(all_rays), dtype=bool)
    is_last[:-1] = all_rays[1:] != all_rays[:-1]
    endpoint_cells = np.floor(g1).astype(np.int64)
    drop = is_last & (all_cells == endpoint_cells[all_rays]).all(axis=1)
    half = 1 << (config.depth_levels - 1 - depth)
    return all_rays[~drop], all_cells[~drop] + half


def cell_codes(cells: np.ndarray, depth: int) -> np.ndarray:
    """Morton codes (uint64) of cell indices given at `depth`."""
    return morton.encode_array(cells << depth)


def raycast(config: MapConfig, origin: Point, endpoint: Point, depth: int = 0) -> list[NodeCode]:
    code_from_point(config, origin, depth)
    code_from_point(config, endpoint, depth)
    _, cells = traverse(
        config, np.array([origin], np.float64), np.array([endpoint], np.float64), depth
    )
    return [NodeCode(int(code), depth) for code in cell_codes(cells, depth)]


def resolve_slots(frame: ScanFrame, slots: Optional[Sequence[int]]) -> tuple[int, ...]:
    if slots is None:
        slots = frame.integrate_slots
    if slots is None:
        slots = (0,) if frame.slot_count > 0 else ()
    slots = tuple(slots)
    check_slots(slots, frame.slot_count)
    return slots


def _exit_distance(config: MapConfig, origin: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Distance along unit directions until the world extent is left."""
    bound = config.half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        upper = (bound - origin) / directions
        lower = (-bound - origin) / directions
    exits = np.where(directions > 0, upper, np.where(directions < 0, lower, np.inf))
    return exits.min(axis=1)


def _hit_updates(
    frame: ScanFrame, hit_rows: np.ndarray, leaf_codes: np.ndarray, slots: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray, list[dict[int, int]]]:
    """Unique hit leaves, their averaged colors and per-label counts."""
    unique, inverse = np.unique(leaf_codes, return_inverse=True)
    inverse = inverse.ravel()
    count = np.bincount(inverse, minlength=len(unique))
    colors = np.empty((len(unique), 3), dtype=np.int64)
    frame_colors = frame.colors[hit_rows].astype(np.int64)
    for channel in range(3):
        total = np.bincount(inverse, weights=frame_colors[:, channel], minlength=len(unique))
        colors[:, channel] = (total.astype(np.int64) + count // 2) // count
    labels: list[dict[int, int]] = [{} for _ in range(len(unique))]
    for slot in slots:
        keys = inverse.astype(np.int64) * 65536 + frame.labels[hit_rows, slot].astype(np.int64)
        key_values, key_counts = np.unique(keys, return_counts=True)
        for key, key_count in zip(key_values.tolist(), key_counts.tolist()):
            voxel, label = divmod(key, 65536)
            labels[voxel][label] = labels[voxel].get(label, 0) + key_count
    return unique, colors, labels


def _apply_miss(occupancy_map: OccupancyMap, code: NodeCode, delta_l: float):
    node = occupancy_map.node(code)
    if code.depth == 0 or node is None or node.leaf:
        occupancy_map.apply_update(code, delta_l)
        return
    for child in code.children():
        _apply_miss(occupancy_map, child, delta_l)


def _early_stop_mask(
    occupancy_map: OccupancyMap, rays: np.ndarray, codes: np.ndarray, depth: int
) -> np.ndarray:
    """Mask of traversal cells before the first voxel already Occupied on each ray."""
    unique, inverse = np.unique(codes, return_inverse=True)
    occupied = np.array(
        [
            occupancy_map.classify(occupancy_map.get_payload(NodeCode(int(c), depth)))
            is OccupancyState.OCCUPIED
            for c in unique.tolist()
        ],
        dtype=np.int64,
    )[inverse.ravel()]
    cumulative = np.cumsum(occupied)
    per_ray = np.bincount(rays, minlength=int(rays.max()) + 1 if len(rays) else 0)
    group_start = np.cumsum(per_ray) - per_ray
    before = (cumulative - occupied)[group_start[rays]]
    return (cumulative - before) == 0


def integrate_frame(
    occupancy_map: OccupancyMap,
    frame: ScanFrame,
    cfg: Optional[IntegratorConfig] = None,
    slots: Optional[Sequence[int]] = None,
) -> IntegrationStats:
    started = time.perf_counter()
    config = occupancy_map.config
    cfg = (cfg if cfg is not None else IntegratorConfig()).check(config)
    slots = resolve_slots(frame, slots)
    occupancy_map.frame_counter = frame.timestep
    if len(frame) == 0:
        return IntegrationStats(frame.timestep, 0, 0, 0, time.perf_counter() - started)

    origin = frame.pose.translation
    try:
        code_from_point(config, tuple(origin.tolist()))  # type: ignore[arg-type]
    except OutOfBounds as e:
        raise PoseInvalid(f"sensor origin outside the map extent: {e}") from e

    world = frame.world_points()
    finite = np.isfinite(world).all(axis=1)
    if not finite.all():
        logger.warning(f"frame {frame.timestep}: dropping {int((~finite).sum())} non-finite points")
    offsets = world - origin
    ranges = np.linalg.norm(offsets, axis=1)
    _, inside = leaf_indices(config, world)
    is_hit = finite & inside & (ranges <= cfg.max_range)

    miss_rows = np.flatnonzero(finite & ~is_hit)
    miss_ends = np.empty((len(miss_rows), 3))
    if len(miss_rows):
        directions = offsets[miss_rows] / ranges[miss_rows, None]
        reach = np.minimum(ranges[miss_rows], cfg.max_range)
        reach = np.minimum(reach, _exit_distance(config, origin, directions) - 1e-6 * config.resolution)
        miss_ends = origin + directions * np.maximum(reach, 0.0)[:, None]
        _, still_inside = leaf_indices(config, miss_ends)
        miss_ends = miss_ends[still_inside]

    hit_rows = np.flatnonzero(is_hit)
    hit_indices, _ = leaf_indices(config, world[hit_rows])
    hit_codes = morton.encode_array(hit_indices)
    unique_hits, colors, labels = _hit_updates(frame, hit_rows, hit_codes, slots)

    depth = cfg.free_depth
    endpoints = np.vstack([world[hit_rows], miss_ends])
    free_parts = []
    for begin in range(0, len(endpoints), RAY_BATCH):
        batch = endpoints[begin : begin + RAY_BATCH]
        origins = np.broadcast_to(origin, batch.shape)
        rays, cells = traverse(config, origins, batch, depth)
        codes = cell_codes(cells, depth)
        if cfg.early_stop and len(codes):
            codes = codes[_early_stop_mask(occupancy_map, rays, codes, depth)]
        free_parts.append(np.unique(codes))
    free_codes = np.unique(np.concatenate(free_parts)) if free_parts else np.zeros(0, np.uint64)
    hit_blocks = unique_hits & ~np.uint64(morton.depth_mask(depth))
    free_codes = np.setdiff1d(free_codes, hit_blocks, assume_unique=False)

    hit_l = config.hit_logodds
    for code, color, counts in zip(unique_hits.tolist(), colors.tolist(), labels):
        occupancy_map.apply_update(NodeCode(code, 0), hit_l, tuple(color), counts)  # type: ignore[arg-type]
    miss_l = config.miss_logodds
    for code in free_codes.tolist():
        _apply_miss(occupancy_map, NodeCode(code, depth), miss_l)
    occupancy_map.propagate()

    stats = IntegrationStats(
        frame.timestep,
        len(frame),
        len(unique_hits),
        len(free_codes),
        time.perf_counter() - started,
    )
    logger.debug(
        f"frame {stats.timestep}: {stats.points} points, {stats.hits} hit voxels, "
        f"{stats.misses} free voxels in {stats.duration:.4f}s"
    )
    return stats


def integrate_frames(
    occupancy_map: OccupancyMap,
    frames: Iterable[ScanFrame],
    cfg: Optional[IntegratorConfig] = None,
    slots: Optional[Sequence[int]] = None,
) -> list[IntegrationStats]:
    return [integrate_frame(occupancy_map, frame, cfg, slots) for frame in frames]
