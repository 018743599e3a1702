import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from voxmap import morton
from voxmap.config import MapConfig
from voxmap.errors import OutOfBounds

logger = logging.getLogger(__name__)

U32_MAX = 2**32 - 1

Point = Tuple[float, float, float]
Color = Tuple[int, int, int]
OccupancyReducer = Callable[[Sequence[float]], float]


def max_reducer(values: Sequence[float]) -> float:
    return max(values)


class OccupancyState(enum.Enum):
    UNKNOWN = "unknown"
    FREE = "free"
    OCCUPIED = "occupied"


class StateCounts(NamedTuple):
    unknown: int
    free: int
    occupied: int

    @property
    def total(self) -> int:
        return self.unknown + self.free + self.occupied


@dataclass(frozen=True, slots=True)
class NodeCode:
    morton: int
    depth: int

    def parent(self) -> "NodeCode":
        return NodeCode(self.morton & ~morton.depth_mask(self.depth + 1), self.depth + 1)

    def ancestor(self, depth: int) -> "NodeCode":
        return NodeCode(self.morton & ~morton.depth_mask(depth), depth)

    def child(self, index: int) -> "NodeCode":
        if self.depth == 0:
            raise ValueError("leaf codes have no children")
        return NodeCode(self.morton | (index << (3 * (self.depth - 1))), self.depth - 1)

    def children(self) -> list["NodeCode"]:
        return [self.child(i) for i in range(8)]

    def child_index(self) -> int:
        return (self.morton >> (3 * self.depth)) & 7

    def indices(self) -> tuple[int, int, int]:
        """Grid indices of this node at its own depth."""
        x, y, z = morton.decode(self.morton)
        return x >> self.depth, y >> self.depth, z >> self.depth


@dataclass(slots=True)
class LeafPayload:
    log_odds: float = 0.0
    color: Color = (0, 0, 0)
    # number of color-carrying updates averaged into color
    color_weight: int = 0
    timestep: int = 0
    semantics: dict[int, int] = field(default_factory=dict)

    def copy(self) -> "LeafPayload":
        return LeafPayload(
            self.log_odds,
            self.color,
            self.color_weight,
            self.timestep,
            dict(self.semantics),
        )

    def labels(self) -> list[tuple[int, int]]:
        return sorted(self.semantics.items())

    def replicated(self, factor: int) -> "LeafPayload":
        """The summary `factor` identical copies of this payload would produce."""
        if factor == 1:
            return self.copy()
        return LeafPayload(
            self.log_odds,
            self.color,
            min(self.color_weight * factor, U32_MAX),
            self.timestep,
            {
                label: min(count * factor, U32_MAX)
                for label, count in self.semantics.items()
            },
        )


@dataclass(slots=True)
class Node:
    payload: LeafPayload
    # depth 0 nodes and collapsed nodes standing for a uniform subtree
    leaf: bool
    modified: bool = False
    # own payload differs from the last published one
    changed: bool = False


def classify(payload: Optional[LeafPayload], config: MapConfig) -> OccupancyState:
    log_odds = 0.0 if payload is None else payload.log_odds
    if log_odds > config.occ_logodds:
        return OccupancyState.OCCUPIED
    if log_odds < config.free_logodds:
        return OccupancyState.FREE
    return OccupancyState.UNKNOWN


def sigmoid(log_odds: float) -> float:
    return 1.0 / (1.0 + math.exp(-log_odds))


def code_from_point(config: MapConfig, point: Point, depth: int = 0) -> NodeCode:
    if not 0 <= depth < config.depth_levels:
        raise ValueError(f"depth {depth} outside [0, {config.depth_levels})")
    half = 1 << (config.depth_levels - 1)
    limit = 1 << config.depth_levels
    indices = []
    for coordinate in point:
        if not math.isfinite(coordinate):
            raise OutOfBounds(f"point {point} is not finite")
        index = math.floor(coordinate / config.resolution) + half
        if not 0 <= index < limit:
            raise OutOfBounds(f"point {point} outside the map extent")
        indices.append(index)
    code = morton.encode(*indices)
    return NodeCode(code & ~morton.depth_mask(depth), depth)


def point_from_code(config: MapConfig, code: NodeCode) -> Point:
    half = 1 << (config.depth_levels - 1)
    offset = (1 << code.depth) * 0.5
    x, y, z = morton.decode(code.morton)
    return (
        (x - half + offset) * config.resolution,
        (y - half + offset) * config.resolution,
        (z - half + offset) * config.resolution,
    )


def leaf_indices(config: MapConfig, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Leaf grid indices of (N, 3) world points and the mask of points inside the extent."""
    half = 1 << (config.depth_levels - 1)
    with np.errstate(invalid="ignore"):
        scaled = np.floor(points / config.resolution)
    finite = np.isfinite(scaled).all(axis=1)
    scaled[~finite] = 0
    indices = scaled.astype(np.int64) + half
    inside = finite & ((indices >= 0) & (indices < (1 << config.depth_levels))).all(axis=1)
    return indices, inside


class OccupancyMap:
    """Sparse octree of occupancy, color, timestep and semantic payloads.

    Nodes are kept in one dictionary per depth keyed by morton code; the root lives
    at depth `depth_levels` and its children at `depth_levels - 1`.
    """

    def __init__(
        self,
        config: Optional[MapConfig] = None,
        reducer: OccupancyReducer = max_reducer,
    ):
        self.config = config if config is not None else MapConfig()
        self.reducer = reducer
        self.frame_counter = 0
        # sequence number of the last delta published from, or applied to, this map
        self.delta_seq = 0
        self._levels: list[dict[int, Node]] = [
            {} for _ in range(self.config.depth_levels + 1)
        ]
        self._pending: set[NodeCode] = set()
        self._removed: set[NodeCode] = set()
        self._occ_logodds = self.config.occ_logodds
        self._free_logodds = self.config.free_logodds

    @property
    def root_code(self) -> NodeCode:
        return NodeCode(0, self.config.depth_levels)

    @property
    def summary_pruning_sound(self) -> bool:
        return self.reducer is max_reducer

    def code_from_point(self, point: Point, depth: int = 0) -> NodeCode:
        return code_from_point(self.config, point, depth)

    def point_from_code(self, code: NodeCode) -> Point:
        return point_from_code(self.config, code)

    def classify(self, payload: Optional[LeafPayload]) -> OccupancyState:
        log_odds = 0.0 if payload is None else payload.log_odds
        if log_odds > self._occ_logodds:
            return OccupancyState.OCCUPIED
        if log_odds < self._free_logodds:
            return OccupancyState.FREE
        return OccupancyState.UNKNOWN

    def node(self, code: NodeCode) -> Optional[Node]:
        return self._levels[code.depth].get(code.morton)

    def view(self, node: Node, depth: int) -> LeafPayload:
        """Payload a node presents at its own depth, without copying."""
        if node.leaf and depth > 0:
            return node.payload.replicated(8**depth)
        return node.payload

    def get_payload(self, code: NodeCode) -> Optional[LeafPayload]:
        self.check_code(code)
        node = self._levels[code.depth].get(code.morton)
        if node is not None:
            return self.view(node, code.depth).copy()
        for depth in range(code.depth + 1, self.config.depth_levels + 1):
            ancestor = self._levels[depth].get(code.morton & ~morton.depth_mask(depth))
            if ancestor is None:
                continue
            if ancestor.leaf:
                return ancestor.payload.replicated(8**code.depth)
            return None
        return None

    def has_children(self, code: NodeCode) -> bool:
        node = self.node(code)
        return node is not None and not node.leaf

    def node_count(self) -> int:
        return sum(len(level) for level in self._levels)

    def state_counts(self) -> StateCounts:
        """Leaf-resolution voxels covered by stored leaves and collapsed nodes, by state."""
        counts = {state: 0 for state in OccupancyState}
        for depth, level in enumerate(self._levels):
            for node in level.values():
                if node.leaf:
                    counts[self.classify(node.payload)] += 8**depth
        return StateCounts(
            counts[OccupancyState.UNKNOWN],
            counts[OccupancyState.FREE],
            counts[OccupancyState.OCCUPIED],
        )

    def is_empty(self) -> bool:
        return self.node_count() == 0

    def iter_nodes(self) -> Iterator[tuple[NodeCode, Node]]:
        """All stored nodes, parents before children, morton ascending within a depth."""
        for depth in range(self.config.depth_levels, -1, -1):
            level = self._levels[depth]
            for code in sorted(level):
                yield NodeCode(code, depth), level[code]

    def check_code(self, code: NodeCode):
        if not 0 <= code.depth <= self.config.depth_levels:
            raise OutOfBounds(f"depth {code.depth} outside the tree")
        if code.morton >> (3 * self.config.depth_levels):
            raise OutOfBounds(f"code {code} outside the map extent")
        if code.morton & morton.depth_mask(code.depth):
            raise ValueError(f"code {code} is not canonical for its depth")

    def _node_for_update(self, code: NodeCode) -> Node:
        """Walk from the root to `code`, creating or expanding nodes and flagging the path."""
        self.check_code(code)
        top = self.config.depth_levels
        node: Optional[Node] = None
        for depth in range(top, code.depth - 1, -1):
            current = code.ancestor(depth)
            level = self._levels[depth]
            node = level.get(current.morton)
            if node is None:
                node = Node(LeafPayload(), leaf=depth == code.depth, changed=True)
                level[current.morton] = node
                self._removed.discard(current)
            elif node.leaf and depth > code.depth:
                self._expand(current, node)
            node.modified = True
            if depth > code.depth:
                self._pending.add(current)
        assert node is not None
        return node

    def _expand(self, code: NodeCode, node: Node):
        logger.debug(f"expanding collapsed node {code}")
        for child in code.children():
            self._levels[child.depth][child.morton] = Node(
                node.payload.copy(), leaf=True, changed=True, modified=True
            )
            self._removed.discard(child)
        node.leaf = False
        node.changed = True

    def apply_update(
        self,
        code: NodeCode,
        delta_l: float,
        color: Optional[Color] = None,
        labels: Optional[Mapping[int, int]] = None,
        timestep: Optional[int] = None,
    ) -> LeafPayload:
        """Apply one occupancy update, optionally with a color and label counts, to a node.

        Nodes above depth 0 are updated as uniform regions.
        """
        stamp = self.frame_counter if timestep is None else timestep
        if not 0 <= stamp <= U32_MAX:
            raise OutOfBounds(f"timestep {stamp} does not fit in 32 bits")
        node = self._node_for_update(code)
        payload = node.payload
        config = self.config
        payload.log_odds = min(max(payload.log_odds + delta_l, config.l_min), config.l_max)
        payload.timestep = max(payload.timestep, stamp)
        if color is not None:
            weight = payload.color_weight
            total = weight + 1
            payload.color = tuple(  # type: ignore[assignment]
                (old * weight + new + total // 2) // total
                for old, new in zip(payload.color, color)
            )
            payload.color_weight = min(total, U32_MAX)
        if labels:
            semantics = payload.semantics
            for label, count in labels.items():
                semantics[label] = min(semantics.get(label, 0) + count, U32_MAX)
            if list(semantics) != sorted(semantics):
                payload.semantics = dict(sorted(semantics.items()))
        node.changed = True
        return payload

    def update_leaf(
        self,
        code: NodeCode,
        delta_l: float,
        color: Optional[Color] = None,
        label: Optional[int] = None,
        timestep: Optional[int] = None,
    ) -> LeafPayload:
        if code.depth != 0:
            raise ValueError(f"update_leaf needs a leaf code, got depth {code.depth}")
        labels = None if label is None else {label: 1}
        return self.apply_update(code, delta_l, color, labels, timestep).copy()

    def _summarize(self, code: NodeCode) -> LeafPayload:
        child_depth = code.depth - 1
        level = self._levels[child_depth]
        views = []
        for i in range(8):
            child = level.get(code.morton | (i << (3 * child_depth)))
            if child is not None:
                views.append(self.view(child, child_depth))
        missing = 8 - len(views)
        summary = LeafPayload()
        summary.log_odds = self.reducer(
            [view.log_odds for view in views] + [0.0] * missing
        )
        summary.timestep = max((view.timestep for view in views), default=0)
        total_weight = sum(view.color_weight for view in views)
        if total_weight > 0:
            summary.color = tuple(  # type: ignore[assignment]
                (sum(view.color[c] * view.color_weight for view in views) + total_weight // 2)
                // total_weight
                for c in range(3)
            )
            summary.color_weight = min(total_weight, U32_MAX)
        semantics: dict[int, int] = {}
        for view in views:
            for label, count in view.semantics.items():
                semantics[label] = semantics.get(label, 0) + count
        summary.semantics = {
            label: min(count, U32_MAX) for label, count in sorted(semantics.items())
        }
        return summary

    def propagate(self):
        if not self._pending:
            return
        buckets: dict[int, list[NodeCode]] = {}
        for code in self._pending:
            buckets.setdefault(code.depth, []).append(code)
        self._pending = set()
        for depth in sorted(buckets):
            level = self._levels[depth]
            for code in buckets[depth]:
                node = level.get(code.morton)
                if node is None or node.leaf:
                    continue
                summary = self._summarize(code)
                if summary != node.payload:
                    node.payload = summary
                    node.changed = True
                    node.modified = True

    def prune(self) -> int:
        self.propagate()
        collapsed = 0
        for depth in range(1, self.config.depth_levels + 1):
            level = self._levels[depth]
            child_level = self._levels[depth - 1]
            for code_value in sorted(level):
                node = level[code_value]
                if node.leaf:
                    continue
                code = NodeCode(code_value, depth)
                children = [child_level.get(child.morton) for child in code.children()]
                first = children[0]
                if first is None or not first.leaf:
                    continue
                if not all(
                    child is not None and child.leaf and child.payload == first.payload
                    for child in children[1:]
                ):
                    continue
                for child in code.children():
                    del child_level[child.morton]
                    self._removed.add(child)
                node.payload = first.payload.copy()
                node.leaf = True
                node.changed = True
                self._mark_path(code)
                collapsed += 1
        if collapsed:
            logger.debug(f"pruned {collapsed} uniform subtrees")
        return collapsed

    def _mark_path(self, code: NodeCode):
        for depth in range(code.depth, self.config.depth_levels + 1):
            node = self._levels[depth].get(code.morton & ~morton.depth_mask(depth))
            if node is not None:
                node.modified = True

    def collect_changes(self) -> tuple[list[tuple[NodeCode, Node]], list[NodeCode]]:
        """Changed nodes and removed codes since the last call; clears all flags.

        Only subtrees carrying a modified flag are visited.
        """
        changed: list[tuple[NodeCode, Node]] = []
        root = self.root_code
        stack = [root] if self.node(root) is not None else []
        while stack:
            code = stack.pop()
            node = self._levels[code.depth].get(code.morton)
            if node is None or not node.modified:
                continue
            if node.changed:
                changed.append((code, node))
            node.modified = False
            node.changed = False
            if node.leaf:
                continue
            child_level = self._levels[code.depth - 1]
            for i in range(8):
                child_code = code.morton | (i << (3 * (code.depth - 1)))
                child = child_level.get(child_code)
                if child is not None and child.modified:
                    stack.append(NodeCode(child_code, code.depth - 1))
        removed = sorted(
            self._removed, key=lambda c: (-c.depth, c.morton)
        )
        self._removed = set()
        return changed, removed

    def set_node(self, code: NodeCode, payload: LeafPayload, leaf: bool):
        """Overwrite or create a node verbatim (replica side of the delta protocol)."""
        self.check_code(code)
        self._levels[code.depth][code.morton] = Node(payload, leaf=leaf)

    def clear(self):
        for level in self._levels:
            level.clear()
        self._pending = set()
        self._removed = set()

    def remove_subtree(self, code: NodeCode):
        self.check_code(code)
        stack = [code]
        while stack:
            current = stack.pop()
            node = self._levels[current.depth].pop(current.morton, None)
            if node is not None and current.depth > 0:
                stack.extend(current.children())
