import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

import numpy as np

from voxmap.errors import (
    CorruptFrame,
    CountMismatch,
    EmptyInput,
    IngestError,
    PoseInvalid,
    PoseParseError,
)
from voxmap.integrator import Pose, ScanFrame

logger = logging.getLogger(__name__)

FRAME_MAGIC = b"VOXPTS01"
FRAME_HEADER = struct.Struct("<8sIB")
POSES_FILE = "poses.txt"
META_FILE = "meta.txt"
FRAME_SUFFIX = ".pts"

PathLike = Union[str, Path]


def point_dtype(slot_count: int) -> np.dtype:
    fields: list[tuple] = [("position", "<f4", (3,)), ("rgb", "u1", (3,)), ("pad", "u1")]
    if slot_count:
        fields.append(("labels", "<u2", (slot_count,)))
    return np.dtype(fields)


def frame_name(index: int) -> str:
    return f"{index:06d}{FRAME_SUFFIX}"


def parse_pose_line(line: str, number: int = 0) -> Pose:
    parts = line.split()
    if len(parts) != 12:
        raise PoseParseError(f"pose line {number}: expected 12 values, found {len(parts)}")
    try:
        return Pose.from_values([float(p) for p in parts])
    except ValueError as e:
        raise PoseParseError(f"pose line {number}: {e}") from e
    except PoseInvalid as e:
        raise PoseParseError(f"pose line {number}: {e}") from e


def format_pose(pose: Pose) -> str:
    return " ".join(repr(v) for v in pose.to_values())


def decode_frame(data: bytes, timestep: int, pose: Pose) -> ScanFrame:
    try:
        magic, count, slot_count = FRAME_HEADER.unpack_from(data, 0)
    except struct.error as e:
        raise CorruptFrame(f"frame header truncated ({len(data)} bytes)") from e
    if magic != FRAME_MAGIC:
        raise CorruptFrame(f"bad frame magic {magic!r}")
    dtype = point_dtype(slot_count)
    expected = FRAME_HEADER.size + count * dtype.itemsize
    if len(data) != expected:
        raise CorruptFrame(f"frame of {count} points needs {expected} bytes, found {len(data)}")
    points = np.frombuffer(data, dtype=dtype, count=count, offset=FRAME_HEADER.size)
    labels = points["labels"] if slot_count else np.zeros((count, 0), np.uint16)
    return ScanFrame(timestep, pose, points["position"], points["rgb"], labels)


def encode_frame(frame: ScanFrame) -> bytes:
    dtype = point_dtype(frame.slot_count)
    points = np.zeros(len(frame), dtype=dtype)
    points["position"] = frame.positions
    points["rgb"] = frame.colors
    if frame.slot_count:
        points["labels"] = frame.labels
    return FRAME_HEADER.pack(FRAME_MAGIC, len(frame), frame.slot_count) + points.tobytes()


def write_frame(path: PathLike, frame: ScanFrame):
    Path(path).write_bytes(encode_frame(frame))


@dataclass
class LogMeta:
    slot_count: int = 0
    labels: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "LogMeta":
        meta = cls()
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition(" ")
            value = value.strip()
            if key == "slots":
                try:
                    meta.slot_count = int(value)
                except ValueError as e:
                    raise IngestError(f"{META_FILE} line {number}: {raw!r}") from e
            elif key == "labels":
                meta.labels = value
            else:
                logger.warning(f"{META_FILE} line {number}: ignoring unknown key {key!r}")
        return meta

    def dump(self) -> str:
        lines = [f"slots {self.slot_count}"]
        if self.labels:
            lines.append(f"labels {self.labels}")
        return "\n".join(lines) + "\n"


@dataclass
class FrameLog:
    """Directory of `NNNNNN.pts` frames with one pose line per frame.

    Frame `i` is integrated at timestep `i + 1`; timestep 0 stays reserved for
    voxels that were never observed.
    """

    directory: Path
    meta: LogMeta
    poses: list[Pose] = field(repr=False)
    files: list[Path] = field(repr=False)

    @classmethod
    def open(cls, directory: PathLike) -> "FrameLog":
        directory = Path(directory)
        if not directory.is_dir():
            raise IngestError(f"{directory} is not a directory")
        meta_path = directory / META_FILE
        if not meta_path.exists():
            raise IngestError(f"{directory} has no {META_FILE}")
        meta = LogMeta.parse(meta_path.read_text())
        poses_path = directory / POSES_FILE
        lines = poses_path.read_text().splitlines() if poses_path.exists() else []
        poses = [parse_pose_line(line, n) for n, line in enumerate(lines, start=1) if line.strip()]
        files = sorted(directory.glob(f"*{FRAME_SUFFIX}"))
        if len(files) != len(poses):
            raise CountMismatch(f"{len(files)} frame files but {len(poses)} poses")
        for index, path in enumerate(files):
            if path.name != frame_name(index):
                raise CorruptFrame(f"expected {frame_name(index)}, found {path.name}")
        logger.debug(f"opened log {directory} with {len(files)} frames")
        return cls(directory, meta, poses, files)

    def __len__(self) -> int:
        return len(self.files)

    @property
    def slot_count(self) -> int:
        return self.meta.slot_count

    @property
    def labels_path(self) -> Optional[Path]:
        if self.meta.labels is None:
            return None
        return self.directory / self.meta.labels

    def read_frame(self, index: int) -> ScanFrame:
        if not 0 <= index < len(self):
            raise IndexError(f"frame {index} outside [0, {len(self)})")
        frame = decode_frame(self.files[index].read_bytes(), index + 1, self.poses[index])
        if frame.slot_count != self.slot_count:
            raise CorruptFrame(
                f"{self.files[index].name} has {frame.slot_count} label slots, "
                f"{META_FILE} declares {self.slot_count}"
            )
        return frame

    def frames(self) -> Iterator[ScanFrame]:
        for index in range(len(self)):
            yield self.read_frame(index)


def read_frame(log: FrameLog, index: int) -> ScanFrame:
    return log.read_frame(index)


def write_log(
    directory: PathLike,
    frames: Iterable[ScanFrame],
    slot_count: int,
    labels: Optional[str] = None,
) -> FrameLog:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob(f"*{FRAME_SUFFIX}"):
        stale.unlink()
    pose_lines = []
    for index, frame in enumerate(frames):
        if frame.slot_count != slot_count:
            raise CountMismatch(
                f"frame {index} has {frame.slot_count} label slots, expected {slot_count}"
            )
        write_frame(directory / frame_name(index), frame)
        pose_lines.append(format_pose(frame.pose))
    (directory / POSES_FILE).write_text("".join(line + "\n" for line in pose_lines))
    (directory / META_FILE).write_text(LogMeta(slot_count, labels).dump())
    logger.debug(f"wrote log {directory} with {len(pose_lines)} frames")
    return FrameLog.open(directory)


def convert_kitti(
    velodyne: PathLike,
    labels: Optional[PathLike],
    poses: PathLike,
    out: PathLike,
) -> FrameLog:
    """Convert per-scan `x y z intensity` float32 binaries and uint32 label files.

    Intensity is dropped, colors are zeroed and the lower 16 bits of each label
    word become the semantic id.
    """
    scans = sorted(Path(velodyne).glob("*.bin"))
    if not scans:
        raise EmptyInput(f"no .bin scans in {velodyne}")
    label_files = sorted(Path(labels).glob("*.label")) if labels is not None else []
    if labels is not None and len(label_files) != len(scans):
        raise CountMismatch(f"{len(scans)} scans but {len(label_files)} label files")
    lines = [line for line in Path(poses).read_text().splitlines() if line.strip()]
    if len(lines) != len(scans):
        raise CountMismatch(f"{len(scans)} scans but {len(lines)} poses")

    def frames() -> Iterator[ScanFrame]:
        for index, scan in enumerate(scans):
            raw = np.fromfile(scan, dtype="<f4")
            if raw.size % 4:
                raise CorruptFrame(f"{scan.name}: size is not a multiple of 16 bytes")
            points = raw.reshape(-1, 4)
            if label_files:
                words = np.fromfile(label_files[index], dtype="<u4")
                if len(words) != len(points):
                    raise CountMismatch(
                        f"{scan.name}: {len(points)} points but {len(words)} labels"
                    )
                frame_labels = (words & 0xFFFF).astype(np.uint16).reshape(-1, 1)
            else:
                frame_labels = np.zeros((len(points), 0), np.uint16)
            yield ScanFrame(
                index + 1,
                parse_pose_line(lines[index], index + 1),
                points[:, :3],
                np.zeros((len(points), 3), np.uint8),
                frame_labels,
            )

    return write_log(out, frames(), 1 if label_files else 0)
