"""Region and predicate queries over an occupancy map at any depth.

Space without stored nodes is answered as Unknown without being materialized, and
subtrees below collapsed nodes are walked virtually with the collapsed payload.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

from voxmap import morton
from voxmap.config import MapConfig
from voxmap.octree import (
    LeafPayload,
    NodeCode,
    OccupancyMap,
    OccupancyState,
    Point,
    StateCounts,
)
from voxmap.semantics import voxel_top_label

logger = logging.getLogger(__name__)

ALL_STATES = frozenset(OccupancyState)

# states a voxel below a summary of the given state can be in (max reducer)
_POSSIBLE_STATES = {
    OccupancyState.OCCUPIED: ALL_STATES,
    OccupancyState.UNKNOWN: frozenset({OccupancyState.UNKNOWN, OccupancyState.FREE}),
    OccupancyState.FREE: frozenset({OccupancyState.FREE}),
}

UNKNOWN_PAYLOAD = LeafPayload()

Cell = tuple[tuple[int, int, int], int]


def _grid(config: MapConfig, point: Point) -> tuple[float, float, float]:
    """Continuous leaf-grid coordinates of a world point."""
    half = 1 << (config.depth_levels - 1)
    return tuple(c / config.resolution + half for c in point)  # type: ignore[return-value]


class Region:
    def intersects(self, config: MapConfig, lower: tuple[int, int, int], size: int) -> bool:
        """Whether any part of the cell may belong to the region (used above the target depth)."""
        raise NotImplementedError

    def contains(self, config: MapConfig, lower: tuple[int, int, int], size: int) -> bool:
        """Whether a cell at the target depth belongs to the region."""
        return self.intersects(config, lower, size)


@dataclass(frozen=True)
class AABB(Region):
    minimum: Point
    maximum: Point

    def __post_init__(self):
        if len(self.minimum) != 3 or len(self.maximum) != 3:
            raise ValueError("box corners need three coordinates")
        if not all(math.isfinite(c) for c in (*self.minimum, *self.maximum)):
            raise ValueError("box corners must be finite")
        if any(lo > hi for lo, hi in zip(self.minimum, self.maximum)):
            raise ValueError(f"box minimum {self.minimum} exceeds maximum {self.maximum}")

    def intersects(self, config: MapConfig, lower: tuple[int, int, int], size: int) -> bool:
        # open overlap: a cell touching the box only on a face is outside
        low = _grid(config, self.minimum)
        high = _grid(config, self.maximum)
        return all(
            start < hi and start + size > lo for start, lo, hi in zip(lower, low, high)
        )


@dataclass(frozen=True)
class Sphere(Region):
    center: Point
    radius: float

    def __post_init__(self):
        if len(self.center) != 3 or not all(math.isfinite(c) for c in self.center):
            raise ValueError("sphere center needs three finite coordinates")
        if not self.radius > 0:
            raise ValueError(f"sphere radius must be positive, got {self.radius}")

    def intersects(self, config: MapConfig, lower: tuple[int, int, int], size: int) -> bool:
        center = _grid(config, self.center)
        distance = 0.0
        for start, c in zip(lower, center):
            nearest = min(max(c, start), start + size)
            distance += (c - nearest) ** 2
        radius = self.radius / config.resolution
        return distance <= radius * radius

    def contains(self, config: MapConfig, lower: tuple[int, int, int], size: int) -> bool:
        center = _grid(config, self.center)
        distance = sum((start + size / 2 - c) ** 2 for start, c in zip(lower, center))
        radius = self.radius / config.resolution
        return distance <= radius * radius


@dataclass(frozen=True)
class Everything(Region):
    def intersects(self, config: MapConfig, lower: tuple[int, int, int], size: int) -> bool:
        return True


class Predicate:
    """Boolean test on voxel payloads.

    `may_match` is asked with the summary of a subtree and must answer True whenever
    any voxel below it can satisfy `evaluate`.
    """

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        raise NotImplementedError

    def may_match(self, summary: LeafPayload, state: OccupancyState) -> bool:
        return True

    def __and__(self, other: "Predicate") -> "Predicate":
        return And((self, other))

    def __or__(self, other: "Predicate") -> "Predicate":
        return Or((self, other))

    def __invert__(self) -> "Predicate":
        return Not(self)


@dataclass(frozen=True)
class StateIn(Predicate):
    states: frozenset[OccupancyState]

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return state in self.states

    def may_match(self, summary: LeafPayload, state: OccupancyState) -> bool:
        return not self.states.isdisjoint(_POSSIBLE_STATES[state])


@dataclass(frozen=True)
class HasLabel(Predicate):
    label: int

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return payload.semantics.get(self.label, 0) > 0

    def may_match(self, summary: LeafPayload, state: OccupancyState) -> bool:
        return self.evaluate(summary, state)


@dataclass(frozen=True)
class TopLabelIs(Predicate):
    label: int

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return voxel_top_label(payload) == self.label

    def may_match(self, summary: LeafPayload, state: OccupancyState) -> bool:
        return summary.semantics.get(self.label, 0) > 0


@dataclass(frozen=True)
class UpdatedBefore(Predicate):
    timestep: int

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return payload.timestep < self.timestep


@dataclass(frozen=True)
class UpdatedAtOrAfter(Predicate):
    timestep: int

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return payload.timestep >= self.timestep

    def may_match(self, summary: LeafPayload, state: OccupancyState) -> bool:
        return summary.timestep >= self.timestep


@dataclass(frozen=True)
class And(Predicate):
    terms: tuple[Predicate, ...]

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return all(term.evaluate(payload, state) for term in self.terms)

    def may_match(self, summary: LeafPayload, state: OccupancyState) -> bool:
        return all(term.may_match(summary, state) for term in self.terms)


@dataclass(frozen=True)
class Or(Predicate):
    terms: tuple[Predicate, ...]

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return any(term.evaluate(payload, state) for term in self.terms)

    def may_match(self, summary: LeafPayload, state: OccupancyState) -> bool:
        return any(term.may_match(summary, state) for term in self.terms)


@dataclass(frozen=True)
class Not(Predicate):
    term: Predicate

    def evaluate(self, payload: LeafPayload, state: OccupancyState) -> bool:
        return not self.term.evaluate(payload, state)


class QueryHit(NamedTuple):
    code: NodeCode
    # None when no node covers the voxel (Unknown)
    payload: Optional[LeafPayload]


class _Traversal:
    def __init__(
        self,
        occupancy_map: OccupancyMap,
        region: Region,
        predicate: Predicate,
        depth: int,
        pruning: bool,
    ):
        self.map = occupancy_map
        self.config = occupancy_map.config
        self.region = region
        self.predicate = predicate
        self.depth = depth
        self.pruning = pruning

    def run(self) -> Iterator[QueryHit]:
        root = self.map.root_code
        yield from self._visit(root, self.map.node(root), None, False)

    def _visit(
        self,
        code: NodeCode,
        node,
        collapsed: Optional[LeafPayload],
        virtual: bool,
    ) -> Iterator[QueryHit]:
        # `virtual` is set below an absent or collapsed node; `collapsed` then holds
        # the payload of the collapsed ancestor, or None for absent space
        lower = morton.decode(code.morton)
        size = 1 << code.depth
        if code.depth == self.depth:
            if not self.region.contains(self.config, lower, size):
                return
            payload = self._payload(code, node, collapsed, virtual)
            view = payload if payload is not None else UNKNOWN_PAYLOAD
            if self.predicate.evaluate(view, self.map.classify(payload)):
                yield QueryHit(code, None if payload is None else payload.copy())
            return
        if not self.region.intersects(self.config, lower, size):
            return
        if self.pruning:
            payload = self._payload(code, node, collapsed, virtual)
            view = payload if payload is not None else UNKNOWN_PAYLOAD
            if not self.predicate.may_match(view, self.map.classify(payload)):
                return
        if virtual:
            for child in code.children():
                yield from self._visit(child, None, collapsed, True)
        elif node is None:
            for child in code.children():
                yield from self._visit(child, None, None, True)
        elif node.leaf:
            for child in code.children():
                yield from self._visit(child, None, node.payload, True)
        else:
            for child in code.children():
                yield from self._visit(child, self.map.node(child), None, False)

    def _payload(
        self,
        code: NodeCode,
        node,
        collapsed: Optional[LeafPayload],
        virtual: bool,
    ) -> Optional[LeafPayload]:
        if virtual:
            return None if collapsed is None else collapsed.replicated(8**code.depth)
        if node is None:
            return None
        return self.map.view(node, code.depth)


def iter_query(
    occupancy_map: OccupancyMap,
    region: Region,
    predicate: Predicate,
    depth: int = 0,
    pruning: Optional[bool] = None,
) -> Iterator[QueryHit]:
    """Voxels at `depth` inside `region` whose payload satisfies `predicate`, morton ordered.

    Summary pruning defaults to on when the map's reducer keeps it sound.
    """
    if not 0 <= depth < occupancy_map.config.depth_levels:
        raise ValueError(f"depth {depth} outside [0, {occupancy_map.config.depth_levels})")
    occupancy_map.propagate()
    if pruning is None:
        pruning = occupancy_map.summary_pruning_sound
    elif pruning and not occupancy_map.summary_pruning_sound:
        logger.warning("summary pruning requested with a non-max reducer; disabling it")
        pruning = False
    return _Traversal(occupancy_map, region, predicate, depth, pruning).run()


def query(
    occupancy_map: OccupancyMap,
    region: Region,
    predicate: Predicate,
    depth: int = 0,
    pruning: Optional[bool] = None,
) -> list[QueryHit]:
    return list(iter_query(occupancy_map, region, predicate, depth, pruning))


def occlusion_predicate(now: int, stale_after: int) -> Predicate:
    return Or((StateIn(frozenset({OccupancyState.UNKNOWN})), UpdatedBefore(now - stale_after)))


def occluded(
    occupancy_map: OccupancyMap,
    region: Region,
    now: int,
    stale_after: int,
    depth: int = 0,
) -> list[NodeCode]:
    """Voxels that are Unknown or were last updated more than `stale_after` steps before `now`."""
    predicate = occlusion_predicate(now, stale_after)
    return [hit.code for hit in iter_query(occupancy_map, region, predicate, depth)]


def count_states(occupancy_map: OccupancyMap, region: Region, depth: int = 0) -> StateCounts:
    counts = {state: 0 for state in OccupancyState}
    for hit in iter_query(occupancy_map, region, StateIn(ALL_STATES), depth):
        counts[occupancy_map.classify(hit.payload)] += 1
    return StateCounts(
        counts[OccupancyState.UNKNOWN],
        counts[OccupancyState.FREE],
        counts[OccupancyState.OCCUPIED],
    )
