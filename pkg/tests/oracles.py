"""Brute-force reference implementations used by the tests."""

import math
from typing import Optional

import numpy as np

from voxmap import morton
from voxmap.config import MapConfig
from voxmap.octree import LeafPayload, NodeCode, OccupancyMap, Point
from voxmap.query import AABB, Everything, Predicate, Region, Sphere

UNKNOWN = LeafPayload()


def random_map(
    rng: np.random.Generator,
    config: MapConfig,
    updates: int = 150,
    span: int = 12,
    labels: tuple[int, ...] = (1, 2, 3),
    uniform_blocks: int = 2,
    prune: bool = True,
) -> OccupancyMap:
    """Random leaf updates inside a span^3 block of leaves, plus a few uniform 2x2x2
    blocks so pruning has something to collapse."""
    occupancy_map = OccupancyMap(config)
    half = 1 << (config.depth_levels - 1)
    low = half - span // 2
    hit, miss = config.hit_logodds, config.miss_logodds
    for _ in range(updates):
        x, y, z = (int(v) for v in rng.integers(low, low + span, 3))
        code = NodeCode(morton.encode(x, y, z), 0)
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        label = int(rng.choice(labels)) if rng.random() < 0.7 else None
        delta = hit if rng.random() < 0.5 else miss
        occupancy_map.update_leaf(
            code, delta, color if rng.random() < 0.5 else None, label, int(rng.integers(1, 200))
        )
    for _ in range(uniform_blocks):
        x, y, z = (int(v) & ~1 for v in rng.integers(low, low + span - 1, 3))
        parent = NodeCode(morton.encode(x, y, z), 1)
        stamp = int(rng.integers(1, 200))
        for child in parent.children():
            occupancy_map.update_leaf(child, miss, None, None, stamp)
            occupancy_map.update_leaf(child, miss, None, None, stamp)
    occupancy_map.propagate()
    if prune:
        occupancy_map.prune()
    return occupancy_map


def cell_bounds(config: MapConfig, code: NodeCode) -> tuple[np.ndarray, np.ndarray]:
    half = 1 << (config.depth_levels - 1)
    lower = (np.array(morton.decode(code.morton), dtype=np.float64) - half) * config.resolution
    return lower, lower + config.voxel_size(code.depth)


def in_region(config: MapConfig, region: Region, code: NodeCode) -> bool:
    lower, upper = cell_bounds(config, code)
    if isinstance(region, Everything):
        return True
    if isinstance(region, AABB):
        return bool(
            np.all(lower < np.array(region.maximum)) and np.all(upper > np.array(region.minimum))
        )
    if isinstance(region, Sphere):
        center = (lower + upper) / 2
        return bool(np.linalg.norm(center - np.array(region.center)) <= region.radius)
    raise TypeError(region)


def all_codes(config: MapConfig, depth: int) -> list[NodeCode]:
    cells = 1 << (config.depth_levels - depth)
    return sorted(
        (
            NodeCode(morton.encode(i << depth, j << depth, k << depth), depth)
            for i in range(cells)
            for j in range(cells)
            for k in range(cells)
        ),
        key=lambda c: c.morton,
    )


def scan(
    occupancy_map: OccupancyMap, region: Region, predicate: Predicate, depth: int
) -> list[tuple[NodeCode, Optional[LeafPayload]]]:
    """Every voxel at `depth`, tested one by one."""
    occupancy_map.propagate()
    found = []
    for code in all_codes(occupancy_map.config, depth):
        if not in_region(occupancy_map.config, region, code):
            continue
        payload = occupancy_map.get_payload(code)
        view = payload if payload is not None else UNKNOWN
        if predicate.evaluate(view, occupancy_map.classify(payload)):
            found.append((code, payload))
    return found


def supercover(config: MapConfig, origin: Point, endpoint: Point, depth: int = 0) -> list[NodeCode]:
    """Cells crossed by origin -> endpoint, found by sampling the midpoint of every
    interval between consecutive boundary crossings; the endpoint's cell is left out."""
    scale = config.voxel_size(depth)
    g0 = [c / scale for c in origin]
    g1 = [c / scale for c in endpoint]
    delta = [b - a for a, b in zip(g0, g1)]
    crossings = {0.0, 1.0}
    for axis in range(3):
        if delta[axis] == 0:
            continue
        low, high = sorted((g0[axis], g1[axis]))
        boundary = math.floor(low) + 1
        while boundary < high:
            crossings.add((boundary - g0[axis]) / delta[axis])
            boundary += 1
    ordered = sorted(crossings)
    cells: list[tuple[int, int, int]] = []
    for a, b in zip(ordered, ordered[1:]):
        if b <= a:
            continue
        middle = (a + b) / 2
        cell = tuple(math.floor(g0[i] + middle * delta[i]) for i in range(3))
        if not cells or cells[-1] != cell:
            cells.append(cell)  # type: ignore[arg-type]
    if cells and cells[-1] == tuple(math.floor(c) for c in g1):
        cells.pop()
    half = 1 << (config.depth_levels - 1 - depth)
    return [
        NodeCode(morton.encode(*((c + half) << depth for c in cell)), depth) for cell in cells
    ]


def iou_by_hand(matrix: np.ndarray) -> list[float]:
    """Per-class IoU from a (C, C + 1) confusion matrix, zero for classes never seen."""
    size = matrix.shape[0]
    result = []
    for c in range(size):
        tp = matrix[c, c]
        fp = sum(matrix[r, c] for r in range(size)) - tp
        fn = sum(matrix[c, k] for k in range(size + 1)) - tp
        total = tp + fp + fn
        result.append(tp / total if total else 0.0)
    return result
