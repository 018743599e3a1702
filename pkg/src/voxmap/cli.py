import csv
import functools
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Optional, TextIO

import anyio
import click
from pydantic import TypeAdapter, ValidationError

from voxmap.codec import read_map, write_map
from voxmap.config import IntegratorConfig, MapConfig, VoxmapConfig
from voxmap.errors import CommandError, VoxmapError
from voxmap.ingest import FrameLog, convert_kitti
from voxmap.octree import OccupancyMap
from voxmap.parsing import parse_predicate, parse_region
from voxmap.pipeline import bench_log, build_map, evaluate_log
from voxmap.query import iter_query
from voxmap.semantics import LabelSet, load_remap, voxel_top_label
from voxmap.stream import RecordedDeltaSource, parse_address, serve, subscribe
from voxmap.synth import load_scene, synth_log

logger = logging.getLogger(__name__)


class CommaList(click.ParamType):
    name = "list"

    def __init__(self, item: Callable[[str], Any]):
        self.item = item

    def convert(self, value, param, ctx):
        if isinstance(value, list):
            return value
        try:
            return [self.item(part) for part in str(value).split(",") if part.strip()]
        except ValueError:
            self.fail(f"{value!r} is not a comma separated list", param, ctx)


def handle_errors(command: Callable) -> Callable:
    """Render library errors as `error: ...` on stderr and exit with their code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except (VoxmapError, OSError) as e:
            error = CommandError.from_exception(e)
        except ValidationError as e:
            error = CommandError(message=f"invalid configuration: {e}", exit_code=2)
        except ValueError as e:
            error = CommandError(message=str(e), exit_code=2)
        logger.debug("command failed", exc_info=True)
        click.echo(error.render(), err=True)
        raise click.exceptions.Exit(error.exit_code)

    return wrapper


def load_config(config_file: Optional[TextIO]) -> VoxmapConfig:
    if config_file is None:
        return VoxmapConfig()
    try:
        raw = json.load(config_file)
    except json.JSONDecodeError as e:
        raise ValueError(f"error parsing JSON configuration: {e}") from e
    return TypeAdapter(VoxmapConfig).validate_python(raw)


def map_config(base: VoxmapConfig, resolution: Optional[float], depth: Optional[int]) -> MapConfig:
    values = base.map.model_dump()
    if resolution is not None:
        values["resolution"] = resolution
    if depth is not None:
        values["depth_levels"] = depth
    return MapConfig.model_validate(values)


def integrator_config(
    base: VoxmapConfig, free_depth: Optional[int], max_range: Optional[float], early_stop: Optional[bool]
) -> IntegratorConfig:
    values = base.integrator.model_dump()
    for key, value in (("free_depth", free_depth), ("max_range", max_range), ("early_stop", early_stop)):
        if value is not None:
            values[key] = value
    return IntegratorConfig.model_validate(values)


def config_option(command: Callable) -> Callable:
    return click.option(
        "--config", "-c", "config_file", type=click.File("r"), help="JSON configuration file."
    )(command)


def map_options(command: Callable) -> Callable:
    command = click.option("--depth", type=int, help="Tree depth levels.")(command)
    command = click.option("--res", "resolution", type=float, help="Leaf voxel size in meters.")(command)
    return command


def integrator_options(command: Callable) -> Callable:
    command = click.option("--early-stop/--no-early-stop", default=None, help="Stop rays at occupied voxels.")(command)
    command = click.option("--max-range", type=float, help="Ray truncation range in meters.")(command)
    command = click.option("--free-depth", type=int, help="Depth at which free space is marked.")(command)
    return command


@click.group()
@click.option("--verbose", "-v", is_flag=True, default=False, help="Enable verbose logging.")
@click.option(
    "--threads",
    type=click.IntRange(min=1),
    default=1,
    envvar="VOXELMAP_THREADS",
    show_default=True,
    help="Reserved; integration runs on one thread.",
)
@click.pass_context
def cli(ctx: click.Context, verbose: bool, threads: int):
    """Hierarchical occupancy and semantic voxel maps."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, stream=sys.stderr)
    if threads > 1:
        logger.warning(f"{threads} threads requested; running single threaded")
    ctx.obj = threads


@cli.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--slots", type=CommaList(int), help="Label slots to integrate, e.g. 1,2.")
@map_options
@integrator_options
@config_option
@handle_errors
def build(log_path, out, slots, resolution, depth, free_depth, max_range, early_stop, config_file):
    """Integrate a frame log into a map file, with a delta stream and run report."""
    base = load_config(config_file)
    config = map_config(base, resolution, depth)
    integrator = integrator_config(base, free_depth, max_range, early_stop).check(config)
    log = FrameLog.open(log_path)
    occupancy_map, report = build_map(log, config, integrator, out, slots or base.slots)
    summary = report.summaries[0]
    click.echo(
        f"{summary.frames} frames, {summary.nodes} nodes, {summary.memory_bytes} bytes, "
        f"integrate {summary.integrate.render()} s/frame"
    )


@cli.command()
@click.option("--map", "map_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--region", required=True, help="aabb:x0,y0,z0,x1,y1,z1 or sphere:cx,cy,cz,r")
@click.option("--pred", "predicate", required=True, help="e.g. 'state in (unknown) and updated_before 50'")
@click.option("--depth", type=int, default=0, show_default=True)
@click.option("--format", "output_format", type=click.Choice(["text", "csv"]), default="text")
@click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False), help="Label set for class names.")
@handle_errors
def query(map_path, region, predicate, depth, output_format, labels_path):
    """List the voxels matching a region and predicate."""
    label_set = LabelSet.load(labels_path) if labels_path else None
    parsed_region = parse_region(region)
    parsed_predicate = parse_predicate(predicate, label_set.ids_by_name() if label_set else None)
    occupancy_map = read_map(map_path)
    header = ["code", "depth", "x", "y", "z", "state", "top_label", "timestep"]
    rows = []
    for hit in iter_query(occupancy_map, parsed_region, parsed_predicate, depth):
        x, y, z = occupancy_map.point_from_code(hit.code)
        top = voxel_top_label(hit.payload)
        if top is None:
            top_text = ""
        elif label_set is not None:
            top_text = label_set.name(top)
        else:
            top_text = str(top)
        rows.append(
            [
                str(hit.code.morton),
                str(hit.code.depth),
                f"{x:.3f}",
                f"{y:.3f}",
                f"{z:.3f}",
                occupancy_map.classify(hit.payload).value,
                top_text,
                str(0 if hit.payload is None else hit.payload.timestep),
            ]
        )
    if output_format == "csv":
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        click.echo(buffer.getvalue(), nl=False)
    else:
        for row in rows:
            click.echo("\t".join(row))


@cli.command(name="eval")
@click.option("--log", "log_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--gt-slot", type=int, required=True)
@click.option("--net-slot", type=int, required=True)
@click.option("--fuse-slots", type=CommaList(int), help="Network slots integrated together.")
@click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False), help="Defaults to the log's label set.")
@click.option("--remap", "remap_path", type=click.Path(exists=True, dir_okay=False))
@map_options
@integrator_options
@config_option
@handle_errors
def evaluate(
    log_path, gt_slot, net_slot, fuse_slots, labels_path, remap_path,
    resolution, depth, free_depth, max_range, early_stop, config_file,
):
    """Per-class IoU of single-scan and map-accumulated labels."""
    base = load_config(config_file)
    config = map_config(base, resolution, depth)
    integrator = integrator_config(base, free_depth, max_range, early_stop).check(config)
    log = FrameLog.open(log_path)
    if labels_path is None:
        if log.labels_path is None:
            raise ValueError("no --labels given and the log names no label set")
        labels_path = log.labels_path
    label_set = LabelSet.load(labels_path)
    remap = load_remap(remap_path) if remap_path else None
    result = evaluate_log(log, label_set, gt_slot, net_slot, config, integrator, fuse_slots, remap)
    click.echo(result.table().render())


@cli.command()
@click.option("--log", "log_path", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--res", "resolutions", required=True, type=CommaList(float), help="e.g. 0.1,0.2")
@click.option("--depth", type=int)
@click.option("--slots", type=CommaList(int))
@click.option("--out", type=click.Path(dir_okay=False), help="Write <out>.report.jsonl and .csv.")
@integrator_options
@config_option
@handle_errors
def bench(log_path, resolutions, depth, slots, out, free_depth, max_range, early_stop, config_file):
    """Single threaded integrate, publish and query timings per resolution."""
    base = load_config(config_file)
    config = map_config(base, None, depth)
    integrator = integrator_config(base, free_depth, max_range, early_stop).check(config)
    report = bench_log(FrameLog.open(log_path), config, integrator, resolutions, slots or base.slots)
    if out:
        report.write(out)
    click.echo(report.render())


@cli.command(name="serve")
@click.option("--map-stream", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--listen", default="127.0.0.1:7878", show_default=True)
@click.option("--once", is_flag=True, default=False, help="Exit after the first subscriber.")
@handle_errors
def serve_command(map_stream, listen, once):
    """Serve a recorded delta stream to subscribers."""
    host, port = parse_address(listen)
    source = RecordedDeltaSource(map_stream)
    anyio.run(functools.partial(serve, source, host, port, once))


@cli.command(name="subscribe")
@click.option("--connect", required=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--base", "base_path", type=click.Path(exists=True, dir_okay=False), help="Map to start from.")
@click.option("--after", type=int, default=0, show_default=True, help="Last delta already in the base map.")
@map_options
@config_option
@handle_errors
def subscribe_command(connect, out, base_path, after, resolution, depth, config_file):
    """Rebuild a replica from a delta stream and write it to a map file."""
    host, port = parse_address(connect)
    if base_path:
        replica = read_map(base_path)
    else:
        replica = OccupancyMap(map_config(load_config(config_file), resolution, depth))
    replica.delta_seq = after
    result = anyio.run(subscribe, replica, host, port)
    write_map(out, replica)
    click.echo(f"applied {result.frames} deltas, last {result.last_applied}")


@cli.command()
@click.option("--kitti-velodyne", "velodyne", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--kitti-labels", "labels", type=click.Path(exists=True, file_okay=False))
@click.option("--poses", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(file_okay=False))
@handle_errors
def convert(velodyne, labels, poses, out):
    """Convert a LiDAR odometry sequence into a frame log."""
    log = convert_kitti(velodyne, labels, poses, out)
    click.echo(f"converted {len(log)} frames")


@cli.command()
@click.option("--scene", "scene_path", type=click.Path(exists=True, dir_okay=False), help="Scene JSON; a small city block by default.")
@click.option("--frames", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@handle_errors
def synth(scene_path, frames, seed, out):
    """Write a synthetic frame log."""
    scene = load_scene(scene_path) if scene_path else None
    log = synth_log(scene, frames, seed, out)
    click.echo(f"wrote {len(log)} frames to {out}")


def main(argv: Optional[list[str]] = None) -> int:
    try:
        result = cli.main(args=argv, prog_name="voxmap", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return e.exit_code
    return result if isinstance(result, int) else 0
