import csv
import io
import json
import logging

import pytest
from click.testing import CliRunner

from voxmap.cli import cli, main
from voxmap.codec import read_map
from voxmap.report import RunReport

STREET = ["--res", "0.4", "--depth", "10"]


@pytest.fixture
def runner() -> CliRunner:
    return CliRunner()


def invoke(runner: CliRunner, *args: str, **kwargs):
    return runner.invoke(cli, [str(arg) for arg in args], catch_exceptions=False, **kwargs)


@pytest.fixture
def scene_file(tmp_path, box_scene):
    path = tmp_path / "scene.json"
    path.write_text(box_scene.model_dump_json())
    return path


@pytest.fixture
def log_dir(runner, tmp_path, scene_file):
    out = tmp_path / "log"
    result = invoke(runner, "synth", "--scene", scene_file, "--frames", "3", "--seed", "1", "--out", out)
    assert result.exit_code == 0, result.output
    assert result.output.strip() == f"wrote 3 frames to {out}"
    return out


@pytest.fixture
def map_file(runner, tmp_path, log_dir):
    out = tmp_path / "street.vxm"
    result = invoke(runner, "build", "--log", log_dir, "--out", out, *STREET)
    assert result.exit_code == 0, result.output
    return out


def csv_rows(output: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(output)))


def test_build_writes_map_stream_and_reports(runner, tmp_path, log_dir, map_file):
    for suffix in (".deltas", ".report.jsonl", ".report.csv"):
        assert (tmp_path / f"street.vxm{suffix}").exists()
    report = RunReport.from_jsonl((tmp_path / "street.vxm.report.jsonl").read_text())
    assert [frame.timestep for frame in report.frames] == [1, 2, 3]
    (summary,) = report.summaries
    assert summary.nodes == read_map(map_file).node_count()
    assert summary.occupied > 0
    again = tmp_path / "again.vxm"
    result = invoke(runner, "build", "--log", log_dir, "--out", again, *STREET)
    assert result.output.startswith("3 frames, ")
    assert again.read_bytes() == map_file.read_bytes()
    assert (tmp_path / "again.vxm.deltas").read_bytes() == (tmp_path / "street.vxm.deltas").read_bytes()


def test_build_empty_log(runner, tmp_path):
    log = tmp_path / "empty"
    assert invoke(runner, "synth", "--frames", "0", "--out", log).exit_code == 0
    result = invoke(runner, "build", "--log", log, "--out", tmp_path / "empty.vxm", *STREET)
    assert result.exit_code == 0, result.output
    assert result.output.startswith("0 frames, ")
    assert read_map(tmp_path / "empty.vxm").is_empty()


def test_query_free_space_as_csv(runner, map_file):
    result = invoke(
        runner, "query", "--map", map_file, "--region", "aabb:-2,-2,0.1,2,2,1.5",
        "--pred", "state = free", "--format", "csv",
    )
    assert result.exit_code == 0, result.output
    assert result.output.splitlines()[0] == "code,depth,x,y,z,state,top_label,timestep"
    rows = csv_rows(result.output)
    assert rows
    assert {row["state"] for row in rows} == {"free"}
    assert {row["depth"] for row in rows} == {"0"}
    assert all(1 <= int(row["timestep"]) <= 3 for row in rows)


def test_query_by_class_name(runner, log_dir, map_file):
    result = invoke(
        runner, "query", "--map", map_file, "--region", "aabb:-5,2,0.5,0,6,4",
        "--pred", "top_label = car", "--labels", log_dir / "labels.txt",
    )
    assert result.exit_code == 0, result.output
    rows = [line.split("\t") for line in result.output.splitlines()]
    assert rows
    assert all(len(row) == 8 for row in rows)
    assert {row[6] for row in rows} == {"car"}


def test_query_coarse_depth(runner, map_file):
    result = invoke(
        runner, "query", "--map", map_file, "--region", "sphere:0,0,1,4",
        "--pred", "not state = unknown", "--depth", "3",
    )
    assert result.exit_code == 0, result.output
    assert result.output
    assert {line.split("\t")[1] for line in result.output.splitlines()} == {"3"}


def test_malformed_predicate(runner, map_file):
    result = runner.invoke(
        cli, ["query", "--map", str(map_file), "--region", "all", "--pred", "state = solid"]
    )
    assert result.exit_code == 2
    lines = result.output.splitlines()
    assert lines[0].startswith("error: ")
    assert lines[1] == "state = solid"
    assert lines[2].index("^") == 8


def test_malformed_region(runner, map_file):
    result = runner.invoke(
        cli, ["query", "--map", str(map_file), "--region", "cube:1", "--pred", "state = free"]
    )
    assert result.exit_code == 2
    assert "^" in result.output


def test_eval_without_label_noise(runner, tmp_path, ground_scene):
    scene = tmp_path / "ground.json"
    scene.write_text(ground_scene.model_dump_json())
    log = tmp_path / "ground"
    invoke(runner, "synth", "--scene", scene, "--frames", "2", "--out", log)
    result = invoke(runner, "eval", "--log", log, "--gt-slot", "0", "--net-slot", "1", *STREET)
    assert result.exit_code == 0, result.output
    assert "road" in result.output
    assert "single scan" in result.output
    assert result.output.count("100.0") >= 2


def test_eval_unknown_slot(runner, log_dir):
    result = runner.invoke(
        cli, ["eval", "--log", str(log_dir), "--gt-slot", "0", "--net-slot", "7", *STREET]
    )
    assert result.exit_code == 1
    assert "UnknownSlot" in result.output


def test_eval_with_remap(runner, tmp_path, log_dir):
    remap = tmp_path / "remap.txt"
    remap.write_text("20 10\n")
    result = invoke(
        runner, "eval", "--log", log_dir, "--gt-slot", "0", "--net-slot", "1",
        "--fuse-slots", "1,2", "--remap", remap, *STREET,
    )
    assert result.exit_code == 0, result.output
    assert "map fusion" in result.output
    assert "person" not in result.output


def test_bench_reports_every_resolution(runner, tmp_path, log_dir):
    prefix = tmp_path / "bench"
    result = invoke(runner, "bench", "--log", log_dir, "--res", "0.4,0.8", "--depth", "10", "--out", prefix)
    assert result.exit_code == 0, result.output
    assert "0.4 m" in result.output
    assert "0.8 m" in result.output
    report = RunReport.from_jsonl((tmp_path / "bench.report.jsonl").read_text())
    fine, coarse = report.summaries
    assert fine.memory_ratio == 1.0
    assert fine.nodes >= 2 * coarse.nodes
    assert len(report.frames) == 6
    lines = (tmp_path / "bench.report.csv").read_text().splitlines()
    assert len(lines) == 3


def test_invalid_config_file(runner, tmp_path, log_dir):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"map": {"resolution": -1.0}}))
    result = runner.invoke(cli, ["build", "--log", str(log_dir), "--out", str(tmp_path / "m"), "--config", str(config)])
    assert result.exit_code == 2
    assert "invalid configuration" in result.output
    config.write_text("{broken")
    result = runner.invoke(cli, ["build", "--log", str(log_dir), "--out", str(tmp_path / "m"), "-c", str(config)])
    assert result.exit_code == 2
    assert "error parsing JSON" in result.output


def test_free_depth_must_fit_the_tree(runner, tmp_path, log_dir):
    result = runner.invoke(
        cli, ["build", "--log", str(log_dir), "--out", str(tmp_path / "m"), "--free-depth", "10", *STREET]
    )
    assert result.exit_code == 2


def test_config_file_supplies_the_map(runner, tmp_path, log_dir, map_file):
    config = tmp_path / "config.json"
    config.write_text(json.dumps({"map": {"resolution": 0.4, "depth_levels": 10}}))
    out = tmp_path / "configured.vxm"
    result = invoke(runner, "build", "--log", log_dir, "--out", out, "--config", config)
    assert result.exit_code == 0, result.output
    assert out.read_bytes() == map_file.read_bytes()


def test_convert_empty_directory(runner, tmp_path):
    velodyne = tmp_path / "velodyne"
    velodyne.mkdir()
    poses = tmp_path / "poses.txt"
    poses.write_text("")
    result = runner.invoke(
        cli, ["convert", "--kitti-velodyne", str(velodyne), "--poses", str(poses), "--out", str(tmp_path / "out")]
    )
    assert result.exit_code == 2
    assert "EmptyInput" in result.output


def test_subscribe_without_server(runner, tmp_path):
    result = runner.invoke(
        cli, ["subscribe", "--connect", "127.0.0.1:1", "--out", str(tmp_path / "replica.vxm"), *STREET]
    )
    assert result.exit_code == 1
    assert "ConnectionLost" in result.output
    assert not (tmp_path / "replica.vxm").exists()


def test_threads_are_reserved(runner, log_dir, tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="voxmap.cli"):
        result = invoke(
            runner, "build", "--log", log_dir, "--out", tmp_path / "m.vxm", *STREET,
            env={"VOXELMAP_THREADS": "4"},
        )
    assert result.exit_code == 0, result.output
    assert "single threaded" in caplog.text


def test_main_returns_the_exit_code(tmp_path, capsys):
    velodyne = tmp_path / "velodyne"
    velodyne.mkdir()
    poses = tmp_path / "poses.txt"
    poses.write_text("")
    assert main(["convert", "--kitti-velodyne", str(velodyne), "--poses", str(poses), "--out", str(tmp_path / "o")]) == 2
    assert "error: EmptyInput" in capsys.readouterr().err
    assert main(["query", "--map", str(tmp_path / "missing.vxm"), "--region", "all", "--pred", "state = free"]) == 2
