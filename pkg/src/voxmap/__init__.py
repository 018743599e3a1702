from voxmap.codec import apply_delta, deserialize_full, publish_delta, serialize_full
from voxmap.config import IntegratorConfig, MapConfig, VoxmapConfig
from voxmap.integrator import Pose, ScanFrame, integrate_frame, raycast
from voxmap.octree import LeafPayload, NodeCode, OccupancyMap, OccupancyState
from voxmap.query import count_states, occluded, query

__all__ = [
    "IntegratorConfig",
    "LeafPayload",
    "MapConfig",
    "NodeCode",
    "OccupancyMap",
    "OccupancyState",
    "Pose",
    "ScanFrame",
    "VoxmapConfig",
    "apply_delta",
    "count_states",
    "deserialize_full",
    "integrate_frame",
    "occluded",
    "publish_delta",
    "query",
    "raycast",
    "serialize_full",
]
