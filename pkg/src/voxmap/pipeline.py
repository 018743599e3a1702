"""Offline replay of frame logs: map building, semantic evaluation and benchmarking."""

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from voxmap.codec import DeltaStreamWriter, publish_delta, serialize_full
from voxmap.config import IntegratorConfig, MapConfig
from voxmap.ingest import FrameLog
from voxmap.integrator import check_slots, integrate_frame
from voxmap.octree import OccupancyMap
from voxmap.query import AABB, occluded
from voxmap.report import FrameReport, IouRow, IouTable, RunReport, SummaryReport, Timing
from voxmap.semantics import ConfusionMatrix, LabelSet, mean_iou, relabel_frame, remap_frame

logger = logging.getLogger(__name__)

# box around the sensor used for the per-frame occlusion query of bench runs
QUERY_HALF_EXTENT = (8.0, 8.0, 2.0)
QUERY_DEPTH = 2
STALE_AFTER = 50


def sidecar_path(out: Union[str, Path]) -> Path:
    return Path(f"{out}.deltas")


def _summarize(
    label: str,
    config: MapConfig,
    occupancy_map: OccupancyMap,
    frames: Sequence[FrameReport],
) -> SummaryReport:
    counts = occupancy_map.state_counts()
    return SummaryReport(
        label=label,
        resolution=config.resolution,
        frames=len(frames),
        integrate=Timing.from_samples([f.integrate for f in frames]),
        publish=Timing.from_samples([f.publish for f in frames]),
        query=Timing.from_samples([f.query for f in frames]),
        memory_bytes=len(serialize_full(occupancy_map)),
        nodes=occupancy_map.node_count(),
        unknown=counts.unknown,
        free=counts.free,
        occupied=counts.occupied,
        delta_bytes=Timing.from_samples([float(f.delta_bytes) for f in frames]),
    )


def _occlusion_region(origin: np.ndarray) -> AABB:
    half = np.array(QUERY_HALF_EXTENT)
    return AABB(tuple((origin - half).tolist()), tuple((origin + half).tolist()))  # type: ignore[arg-type]


def replay(
    log: FrameLog,
    config: MapConfig,
    integrator: IntegratorConfig,
    slots: Optional[Sequence[int]] = None,
    label: str = "",
    stream: Optional[DeltaStreamWriter] = None,
    query: bool = False,
) -> tuple[OccupancyMap, list[FrameReport]]:
    """Integrate every frame of `log` in order, publishing a delta after each one."""
    occupancy_map = OccupancyMap(config)
    reports = []
    for index, frame in enumerate(log.frames()):
        started = time.perf_counter()
        stats = integrate_frame(occupancy_map, frame, integrator, slots)
        integrated = time.perf_counter()
        delta = publish_delta(occupancy_map)
        published = time.perf_counter()
        if stream is not None:
            stream.append(delta)
        query_time = 0.0
        if query:
            occluded(
                occupancy_map,
                _occlusion_region(frame.pose.translation),
                frame.timestep,
                STALE_AFTER,
                min(QUERY_DEPTH, config.depth_levels - 1),
            )
            query_time = time.perf_counter() - published
        reports.append(
            FrameReport(
                label=label,
                index=index,
                timestep=frame.timestep,
                points=stats.points,
                hits=stats.hits,
                misses=stats.misses,
                integrate=integrated - started,
                publish=published - integrated,
                query=query_time,
                delta_bytes=len(delta),
                nodes=occupancy_map.node_count(),
            )
        )
    return occupancy_map, reports


def build_map(
    log: FrameLog,
    config: MapConfig,
    integrator: IntegratorConfig,
    out: Union[str, Path],
    slots: Optional[Sequence[int]] = None,
) -> tuple[OccupancyMap, RunReport]:
    """Build a map file at `out`, its delta stream at `<out>.deltas` and the report files."""
    stream = DeltaStreamWriter(sidecar_path(out))
    occupancy_map, frames = replay(log, config, integrator, slots, stream=stream)
    Path(out).write_bytes(serialize_full(occupancy_map))
    report = RunReport(frames=frames, summaries=[_summarize("build", config, occupancy_map, frames)])
    report.write(out)
    logger.debug(f"built {out}: {occupancy_map.node_count()} nodes, {stream.frames} deltas")
    return occupancy_map, report


def bench_log(
    log: FrameLog,
    config: MapConfig,
    integrator: IntegratorConfig,
    resolutions: Sequence[float],
    slots: Optional[Sequence[int]] = None,
) -> RunReport:
    """Time integrate, publish and an occlusion query per frame at each resolution."""
    report = RunReport()
    for resolution in resolutions:
        run_config = MapConfig.model_validate({**config.model_dump(), "resolution": resolution})
        label = f"{resolution:g} m"
        occupancy_map, frames = replay(log, run_config, integrator, slots, label, query=True)
        report.frames.extend(frames)
        report.summaries.append(_summarize(label, run_config, occupancy_map, frames))
    if report.summaries:
        finest = min(report.summaries, key=lambda s: s.resolution)
        for summary in report.summaries:
            if finest.memory_bytes:
                summary.memory_ratio = summary.memory_bytes / finest.memory_bytes
    return report


@dataclass
class EvaluationResult:
    label_set: LabelSet
    single_scan: ConfusionMatrix
    mapped: ConfusionMatrix
    fused: Optional[ConfusionMatrix] = None

    def table(self) -> IouTable:
        classes = [self.label_set.name(label) for label in self.label_set.evaluation]
        rows = []
        named = [("single scan", self.single_scan), ("map", self.mapped)]
        if self.fused is not None:
            named.append(("map fusion", self.fused))
        for name, cm in named:
            miou, per_class = mean_iou(cm)
            rows.append(IouRow(name=name, miou=miou, per_class=per_class))
        return IouTable(classes=classes, rows=rows)


def evaluate_log(
    log: FrameLog,
    label_set: LabelSet,
    gt_slot: int,
    net_slot: int,
    config: MapConfig,
    integrator: IntegratorConfig,
    fuse_slots: Optional[Sequence[int]] = None,
    remap: Optional[Mapping[int, int]] = None,
) -> EvaluationResult:
    """Score the raw network labels and the labels read back from the map after each frame."""
    check_slots([gt_slot, net_slot, *(fuse_slots or [])], log.slot_count)
    if remap:
        label_set = label_set.remapped(remap)
    single = ConfusionMatrix(label_set)
    mapped = ConfusionMatrix(label_set)
    fused = ConfusionMatrix(label_set) if fuse_slots else None
    network_map = OccupancyMap(config)
    fused_map = OccupancyMap(config) if fuse_slots else None
    for frame in log.frames():
        frame = remap_frame(frame, remap or {})
        truth = frame.labels[:, gt_slot]
        single.accumulate(truth, frame.labels[:, net_slot])
        integrate_frame(network_map, frame, integrator, [net_slot])
        mapped.accumulate(truth, relabel_frame(network_map, frame, net_slot))
        if fused is not None and fused_map is not None and fuse_slots:
            integrate_frame(fused_map, frame, integrator, fuse_slots)
            fused.accumulate(truth, relabel_frame(fused_map, frame, net_slot))
        logger.debug(f"evaluated frame {frame.timestep}")
    return EvaluationResult(label_set, single, mapped, fused)
