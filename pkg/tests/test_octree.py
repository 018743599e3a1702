import math

import numpy as np
import pytest

from voxmap import morton
from voxmap.config import MapConfig, logit
from voxmap.errors import OutOfBounds
from voxmap.octree import (
    U32_MAX,
    LeafPayload,
    NodeCode,
    OccupancyMap,
    OccupancyState,
    classify,
    code_from_point,
    point_from_code,
)


def leaf(config: MapConfig, x: float, y: float, z: float) -> NodeCode:
    return code_from_point(config, (x, y, z))


def test_morton_round_trip(rng):
    for x, y, z in rng.integers(0, 1 << 21, (200, 3)).tolist():
        assert morton.decode(morton.encode(x, y, z)) == (x, y, z)
    indices = rng.integers(0, 1 << 21, (50, 3))
    encoded = morton.encode_array(indices)
    assert encoded.tolist() == [morton.encode(*row) for row in indices.tolist()]


def test_code_from_point_inverts_point_from_code(grid_config, rng):
    for depth in range(grid_config.depth_levels):
        for point in rng.uniform(-8.0, 8.0, (50, 3)).tolist():
            code = code_from_point(grid_config, tuple(point), depth)
            assert code.morton & morton.depth_mask(depth) == 0
            assert code_from_point(grid_config, point_from_code(grid_config, code), depth) == code
            assert math.dist(point, point_from_code(grid_config, code)) <= (
                math.sqrt(3) / 2 * grid_config.voxel_size(depth) + 1e-9
            )


def test_half_open_cells(grid_config):
    assert leaf(grid_config, 0.0, 0.0, 0.0).indices() == (8, 8, 8)
    assert leaf(grid_config, -1e-9, 0.0, 0.0).indices() == (7, 8, 8)
    assert leaf(grid_config, -8.0, -8.0, -8.0).indices() == (0, 0, 0)
    with pytest.raises(OutOfBounds):
        leaf(grid_config, 8.0, 0.0, 0.0)
    with pytest.raises(OutOfBounds):
        leaf(grid_config, math.nan, 0.0, 0.0)


def test_node_code_hierarchy():
    code = NodeCode(morton.encode(5, 3, 6), 0)
    parent = code.parent()
    assert parent.depth == 1
    assert code in parent.children()
    assert parent.child(code.child_index()) == code
    assert code.ancestor(3) == parent.parent().parent()
    with pytest.raises(ValueError):
        code.child(0)


def test_classify_thresholds():
    config = MapConfig(occ_threshold=0.7, free_threshold=0.3)
    assert classify(None, config) is OccupancyState.UNKNOWN
    assert classify(LeafPayload(log_odds=logit(0.71)), config) is OccupancyState.OCCUPIED
    assert classify(LeafPayload(log_odds=logit(0.7)), config) is OccupancyState.UNKNOWN
    assert classify(LeafPayload(log_odds=logit(0.29)), config) is OccupancyState.FREE


def test_invalid_configs_are_rejected():
    with pytest.raises(ValueError):
        MapConfig(p_hit=0.4)
    with pytest.raises(ValueError):
        MapConfig(occ_threshold=0.6, free_threshold=0.5, l_min=1.0)
    with pytest.raises(ValueError):
        MapConfig(depth_levels=22)


def test_clamped_updates_stay_in_bounds(rng):
    config = MapConfig(resolution=1.0, depth_levels=3)
    occupancy_map = OccupancyMap(config)
    code = NodeCode(0, 0)
    for _ in range(2000):
        delta = float(rng.choice([config.hit_logodds, config.miss_logodds])) * float(rng.uniform(0, 5))
        payload = occupancy_map.update_leaf(code, delta)
        assert config.l_min <= payload.log_odds <= config.l_max


def test_update_order_does_not_matter_below_saturation(rng):
    config = MapConfig(resolution=1.0, depth_levels=3, l_min=-1e6, l_max=1e6)
    deltas = rng.choice([config.hit_logodds, config.miss_logodds], 200).tolist()
    results = []
    for order in (deltas, deltas[::-1], list(rng.permutation(deltas))):
        occupancy_map = OccupancyMap(config)
        for delta in order:
            occupancy_map.update_leaf(NodeCode(0, 0), float(delta))
        results.append(occupancy_map.get_payload(NodeCode(0, 0)).log_odds)
    assert results[1] == pytest.approx(results[0], abs=1e-9)
    assert results[2] == pytest.approx(results[0], abs=1e-9)


def test_update_leaf_payload_fields(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    code = leaf(grid_config, 0.5, 0.5, 0.5)
    occupancy_map.update_leaf(code, grid_config.hit_logodds, (100, 0, 0), 4, timestep=7)
    occupancy_map.update_leaf(code, grid_config.hit_logodds, (200, 50, 0), 4, timestep=3)
    payload = occupancy_map.update_leaf(code, grid_config.hit_logodds, None, 9, timestep=5)
    assert payload.color == (150, 25, 0)
    assert payload.color_weight == 2
    assert payload.timestep == 7
    assert payload.semantics == {4: 2, 9: 1}
    assert list(payload.semantics) == sorted(payload.semantics)
    assert payload.log_odds == pytest.approx(min(3 * grid_config.hit_logodds, grid_config.l_max))


def test_update_leaf_rejects_inner_codes(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    with pytest.raises(ValueError):
        occupancy_map.update_leaf(NodeCode(0, 1), 1.0)


def test_absent_voxels_have_no_payload(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    assert occupancy_map.get_payload(leaf(grid_config, 1.5, 1.5, 1.5)) is None
    assert occupancy_map.is_empty()


def test_summary_is_max_of_children(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    hit = leaf(grid_config, 0.5, 0.5, 0.5)
    miss = leaf(grid_config, 1.5, 0.5, 0.5)
    occupancy_map.update_leaf(miss, grid_config.miss_logodds, timestep=2)
    occupancy_map.propagate()
    parent = occupancy_map.get_payload(miss.parent())
    # seven children are unobserved and count as log-odds 0
    assert parent.log_odds == 0.0
    assert occupancy_map.classify(parent) is OccupancyState.UNKNOWN
    occupancy_map.update_leaf(hit, grid_config.hit_logodds, timestep=1)
    occupancy_map.propagate()
    root = occupancy_map.get_payload(occupancy_map.root_code)
    assert root.log_odds == pytest.approx(grid_config.hit_logodds)
    assert root.timestep == 2


def test_semantic_counts_are_conserved(grid_config, rng):
    occupancy_map = OccupancyMap(grid_config)
    totals: dict[int, int] = {}
    for x, y, z, label in zip(*(rng.integers(0, 16, 300) for _ in range(3)), rng.integers(1, 5, 300)):
        code = NodeCode(morton.encode(int(x), int(y), int(z)), 0)
        occupancy_map.update_leaf(code, grid_config.hit_logodds, label=int(label))
        totals[int(label)] = totals.get(int(label), 0) + 1
    occupancy_map.propagate()
    assert occupancy_map.get_payload(occupancy_map.root_code).semantics == dict(sorted(totals.items()))
    for depth in range(1, grid_config.depth_levels + 1):
        level_sum: dict[int, int] = {}
        for code, node in occupancy_map.iter_nodes():
            if code.depth != depth:
                continue
            for label, count in node.payload.semantics.items():
                level_sum[label] = level_sum.get(label, 0) + count
        assert level_sum == totals


def test_replicated_payload_saturates():
    payload = LeafPayload(color_weight=U32_MAX // 4, semantics={1: U32_MAX // 4})
    scaled = payload.replicated(8)
    assert scaled.color_weight == U32_MAX
    assert scaled.semantics == {1: U32_MAX}


def test_prune_collapses_uniform_children(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    parent = leaf(grid_config, 0.5, 0.5, 0.5).parent()
    for child in parent.children():
        occupancy_map.update_leaf(child, grid_config.miss_logodds, label=3, timestep=4)
    occupancy_map.propagate()
    before = occupancy_map.get_payload(parent)
    nodes = occupancy_map.node_count()
    assert occupancy_map.prune() == 1
    assert occupancy_map.node_count() == nodes - 8
    assert occupancy_map.get_payload(parent) == before
    inside = occupancy_map.get_payload(parent.child(5))
    assert inside.semantics == {3: 1}
    assert occupancy_map.classify(inside) is OccupancyState.FREE


def test_update_below_collapsed_node_expands_it(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    parent = leaf(grid_config, 0.5, 0.5, 0.5).parent()
    for child in parent.children():
        occupancy_map.update_leaf(child, grid_config.miss_logodds, timestep=1)
    occupancy_map.prune()
    target = parent.child(2)
    occupancy_map.update_leaf(target, grid_config.hit_logodds, timestep=2)
    occupancy_map.propagate()
    assert occupancy_map.has_children(parent)
    assert occupancy_map.get_payload(target).log_odds == pytest.approx(
        grid_config.miss_logodds + grid_config.hit_logodds
    )
    assert occupancy_map.get_payload(parent.child(3)).log_odds == pytest.approx(grid_config.miss_logodds)


def test_collect_changes_clears_flags(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    code = leaf(grid_config, 2.5, 0.5, 0.5)
    occupancy_map.update_leaf(code, grid_config.hit_logodds)
    occupancy_map.propagate()
    changed, removed = occupancy_map.collect_changes()
    assert {c for c, _ in changed} == {code.ancestor(d) for d in range(grid_config.depth_levels + 1)}
    assert removed == []
    assert occupancy_map.collect_changes() == ([], [])
    assert not any(node.modified or node.changed for _, node in occupancy_map.iter_nodes())


def test_state_counts_cover_collapsed_nodes(grid_config):
    occupancy_map = OccupancyMap(grid_config)
    parent = leaf(grid_config, 0.5, 0.5, 0.5).parent()
    for child in parent.children():
        occupancy_map.update_leaf(child, grid_config.miss_logodds)
    occupancy_map.update_leaf(leaf(grid_config, 5.5, 5.5, 5.5), grid_config.hit_logodds)
    occupancy_map.prune()
    assert occupancy_map.state_counts() == (0, 8, 1)


def test_custom_reducer_disables_summary_pruning(grid_config):
    occupancy_map = OccupancyMap(grid_config, reducer=lambda values: float(np.mean(values)))
    assert not occupancy_map.summary_pruning_sound
    occupancy_map.update_leaf(leaf(grid_config, 0.5, 0.5, 0.5), 8.0)
    occupancy_map.propagate()
    assert occupancy_map.get_payload(leaf(grid_config, 0.5, 0.5, 0.5).parent()).log_odds == pytest.approx(
        min(8.0, grid_config.l_max) / 8
    )
