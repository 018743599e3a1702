"""Binary map files and incremental delta streams.

Everything is little-endian. A map file is a header followed by one record per stored
node; a delta stream is a sequence of length-prefixed frames, each a mini-header and
the records of the nodes changed since the previous publish. Records are ordered by
depth descending, then morton ascending, so parents precede their children.

The map header is magic, format version, resolution, depth levels, the sensor model,
clamping bounds and state thresholds, then the node count. The delta mini-header is
magic, sequence number, record count and a u32 CRC32 of the packed map configuration;
a replica rejects frames whose checksum differs from its own configuration.
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

from pydantic import ValidationError

from voxmap.config import MapConfig
from voxmap.errors import ConfigMismatch, CorruptStream, OutOfBounds, OutOfOrder
from voxmap.octree import LeafPayload, Node, NodeCode, OccupancyMap

logger = logging.getLogger(__name__)

MAP_MAGIC = b"VOXMAP01"
DELTA_MAGIC = b"VOXDLT01"
VERSION = 1

HEADER = struct.Struct("<8sHdB6dQ")
DELTA_HEADER = struct.Struct("<8sQII")
LENGTH = struct.Struct("<I")
RECORD = struct.Struct("<QBB")
LOG_ODDS = struct.Struct("<d")
COLOR = struct.Struct("<3BI")
TIMESTEP = struct.Struct("<I")
PAIR_COUNT = struct.Struct("<H")
PAIR = struct.Struct("<HI")

HAS_LOG_ODDS = 0x01
HAS_COLOR = 0x02
HAS_TIMESTEP = 0x04
HAS_SEMANTICS = 0x08
COLLAPSED = 0x10
TOMBSTONE = 0x80
ALL_FIELDS = HAS_LOG_ODDS | HAS_COLOR | HAS_TIMESTEP | HAS_SEMANTICS
_KNOWN_BITS = ALL_FIELDS | COLLAPSED | TOMBSTONE

# a zero-length frame closes a delta stream on a socket
END_OF_STREAM = LENGTH.pack(0)


@dataclass
class Record:
    code: NodeCode
    payload: Optional[LeafPayload]
    leaf: bool = False

    @property
    def tombstone(self) -> bool:
        return self.payload is None


@dataclass
class DeltaFrame:
    sequence: int
    config_crc: int
    records: list[Record]


def record_size(bitmap: int, pair_count: int = 0) -> int:
    size = RECORD.size
    if bitmap & HAS_LOG_ODDS:
        size += LOG_ODDS.size
    if bitmap & HAS_COLOR:
        size += COLOR.size
    if bitmap & HAS_TIMESTEP:
        size += TIMESTEP.size
    if bitmap & HAS_SEMANTICS:
        size += PAIR_COUNT.size + pair_count * PAIR.size
    return size


def _bitmap(payload: LeafPayload, leaf: bool, full: bool) -> int:
    if full:
        bitmap = ALL_FIELDS
    else:
        # fields left out decode to their defaults
        bitmap = 0
        if payload.log_odds != 0.0:
            bitmap |= HAS_LOG_ODDS
        if payload.color_weight or payload.color != (0, 0, 0):
            bitmap |= HAS_COLOR
        if payload.timestep:
            bitmap |= HAS_TIMESTEP
        if payload.semantics:
            bitmap |= HAS_SEMANTICS
    return bitmap | (COLLAPSED if leaf else 0)


def encode_record(code: NodeCode, node: Optional[Node], full: bool = False) -> bytes:
    if node is None:
        return RECORD.pack(code.morton, code.depth, TOMBSTONE)
    payload = node.payload
    bitmap = _bitmap(payload, node.leaf, full)
    parts = [RECORD.pack(code.morton, code.depth, bitmap)]
    if bitmap & HAS_LOG_ODDS:
        parts.append(LOG_ODDS.pack(payload.log_odds))
    if bitmap & HAS_COLOR:
        parts.append(COLOR.pack(*payload.color, payload.color_weight))
    if bitmap & HAS_TIMESTEP:
        parts.append(TIMESTEP.pack(payload.timestep))
    if bitmap & HAS_SEMANTICS:
        parts.append(PAIR_COUNT.pack(len(payload.semantics)))
        parts.extend(PAIR.pack(label, count) for label, count in payload.labels())
    return b"".join(parts)


def _unpack(layout: struct.Struct, data: bytes, offset: int) -> tuple:
    try:
        return layout.unpack_from(data, offset)
    except struct.error as e:
        raise CorruptStream(f"truncated at byte {offset}") from e


def decode_record(data: bytes, offset: int) -> tuple[Record, int]:
    morton_code, depth, bitmap = _unpack(RECORD, data, offset)
    offset += RECORD.size
    if bitmap & ~_KNOWN_BITS:
        raise CorruptStream(f"unknown record flags {bitmap:#04x}")
    code = NodeCode(morton_code, depth)
    if bitmap & TOMBSTONE:
        if bitmap != TOMBSTONE:
            raise CorruptStream("tombstone record carries fields")
        return Record(code, None), offset
    payload = LeafPayload()
    if bitmap & HAS_LOG_ODDS:
        (payload.log_odds,) = _unpack(LOG_ODDS, data, offset)
        offset += LOG_ODDS.size
    if bitmap & HAS_COLOR:
        r, g, b, weight = _unpack(COLOR, data, offset)
        payload.color = (r, g, b)
        payload.color_weight = weight
        offset += COLOR.size
    if bitmap & HAS_TIMESTEP:
        (payload.timestep,) = _unpack(TIMESTEP, data, offset)
        offset += TIMESTEP.size
    if bitmap & HAS_SEMANTICS:
        (pairs,) = _unpack(PAIR_COUNT, data, offset)
        offset += PAIR_COUNT.size
        semantics = {}
        for _ in range(pairs):
            label, count = _unpack(PAIR, data, offset)
            semantics[label] = count
            offset += PAIR.size
        payload.semantics = dict(sorted(semantics.items()))
    return Record(code, payload, leaf=bool(bitmap & COLLAPSED)), offset


def _decode_records(data: bytes, offset: int, count: int) -> list[Record]:
    records = []
    for _ in range(count):
        record, offset = decode_record(data, offset)
        records.append(record)
    if offset != len(data):
        raise CorruptStream(f"{len(data) - offset} trailing bytes after {count} records")
    return records


def _header(config: MapConfig, node_count: int) -> bytes:
    return HEADER.pack(
        MAP_MAGIC,
        VERSION,
        config.resolution,
        config.depth_levels,
        config.p_hit,
        config.p_miss,
        config.l_min,
        config.l_max,
        config.occ_threshold,
        config.free_threshold,
        node_count,
    )


def serialize_full(occupancy_map: OccupancyMap) -> bytes:
    occupancy_map.propagate()
    records = [encode_record(code, node, full=True) for code, node in occupancy_map.iter_nodes()]
    return _header(occupancy_map.config, len(records)) + b"".join(records)


def _read_header(data: bytes) -> tuple[MapConfig, int]:
    (
        magic,
        version,
        resolution,
        depth_levels,
        p_hit,
        p_miss,
        l_min,
        l_max,
        occ_threshold,
        free_threshold,
        node_count,
    ) = _unpack(HEADER, data, 0)
    if magic != MAP_MAGIC:
        raise CorruptStream(f"bad map magic {magic!r}")
    if version != VERSION:
        raise CorruptStream(f"unsupported map version {version}")
    try:
        config = MapConfig(
            resolution=resolution,
            depth_levels=depth_levels,
            p_hit=p_hit,
            p_miss=p_miss,
            l_min=l_min,
            l_max=l_max,
            occ_threshold=occ_threshold,
            free_threshold=free_threshold,
        )
    except ValidationError as e:
        raise CorruptStream(f"invalid map configuration in header: {e}") from e
    return config, node_count


def _check_records(occupancy_map: OccupancyMap, records: Iterable[Record]):
    try:
        for record in records:
            occupancy_map.check_code(record.code)
    except (OutOfBounds, ValueError) as e:
        raise CorruptStream(f"record outside the map: {e}") from e


def _install(occupancy_map: OccupancyMap, records: Iterable[Record]):
    # records must have passed _check_records
    for record in records:
        if record.payload is None:
            occupancy_map.remove_subtree(record.code)
        else:
            occupancy_map.set_node(record.code, record.payload, record.leaf)


def deserialize_full(data: bytes) -> OccupancyMap:
    config, node_count = _read_header(data)
    records = _decode_records(data, HEADER.size, node_count)
    occupancy_map = OccupancyMap(config)
    _check_records(occupancy_map, records)
    _install(occupancy_map, records)
    return occupancy_map


def maps_equal(a: OccupancyMap, b: OccupancyMap) -> bool:
    return serialize_full(a) == serialize_full(b)


def encode_frame(payload: bytes) -> bytes:
    return LENGTH.pack(len(payload)) + payload


def publish_delta(occupancy_map: OccupancyMap) -> bytes:
    """Frame holding every node changed or removed since the previous publish.

    Clears the change flags and advances the map's delta sequence number.
    """
    occupancy_map.propagate()
    changed, removed = occupancy_map.collect_changes()
    entries: list[tuple[NodeCode, Optional[Node]]] = [(code, None) for code in removed]
    entries += changed
    entries.sort(key=lambda entry: (-entry[0].depth, entry[0].morton))
    occupancy_map.delta_seq += 1
    header = DELTA_HEADER.pack(
        DELTA_MAGIC,
        occupancy_map.delta_seq,
        len(entries),
        occupancy_map.config.fingerprint(),
    )
    body = b"".join(encode_record(code, node) for code, node in entries)
    logger.debug(
        f"published delta {occupancy_map.delta_seq}: {len(changed)} changed, "
        f"{len(removed)} removed, {len(body)} bytes"
    )
    return encode_frame(header + body)


def iter_frames(stream: bytes) -> Iterator[bytes]:
    """Payloads of the length-prefixed frames in `stream`, up to an end-of-stream marker."""
    offset = 0
    while offset < len(stream):
        (length,) = _unpack(LENGTH, stream, offset)
        offset += LENGTH.size
        if length == 0:
            return
        if offset + length > len(stream):
            raise CorruptStream(
                f"frame of {length} bytes truncated to {len(stream) - offset}"
            )
        yield stream[offset : offset + length]
        offset += length


def decode_delta(payload: bytes) -> DeltaFrame:
    magic, sequence, count, config_crc = _unpack(DELTA_HEADER, payload, 0)
    if magic != DELTA_MAGIC:
        raise CorruptStream(f"bad delta magic {magic!r}")
    return DeltaFrame(sequence, config_crc, _decode_records(payload, DELTA_HEADER.size, count))


def apply_delta(replica: OccupancyMap, stream: bytes) -> OccupancyMap:
    """Apply a full map or a run of delta frames to `replica`.

    A stream is decoded and checked completely before the replica is touched.
    """
    if stream[: len(MAP_MAGIC)] == MAP_MAGIC:
        config, node_count = _read_header(stream)
        if config.pack() != replica.config.pack():
            raise ConfigMismatch("map configuration differs from the replica's")
        records = _decode_records(stream, HEADER.size, node_count)
        _check_records(replica, records)
        replica.clear()
        _install(replica, records)
        logger.debug(f"replaced replica with a full map of {node_count} nodes")
        return replica

    frames = [decode_delta(payload) for payload in iter_frames(stream)]
    fingerprint = replica.config.fingerprint()
    expected = replica.delta_seq + 1
    accepted: list[DeltaFrame] = []
    for frame in frames:
        if frame.config_crc != fingerprint:
            raise ConfigMismatch(
                f"delta {frame.sequence} was published with a different map configuration"
            )
        if frame.sequence < expected:
            logger.warning(f"skipping delta {frame.sequence}, already applied")
            continue
        if frame.sequence != expected:
            raise OutOfOrder(expected, frame.sequence)
        _check_records(replica, frame.records)
        accepted.append(frame)
        expected += 1
    for frame in accepted:
        _install(replica, frame.records)
        replica.delta_seq = frame.sequence
        logger.debug(f"applied delta {frame.sequence}: {len(frame.records)} records")
    return replica


def write_map(path: Union[str, Path], occupancy_map: OccupancyMap):
    Path(path).write_bytes(serialize_full(occupancy_map))


def read_map(path: Union[str, Path]) -> OccupancyMap:
    return deserialize_full(Path(path).read_bytes())


class DeltaStreamWriter:
    """Appends published frames to a sidecar stream file."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self.path.write_bytes(b"")
        self.frames = 0
        self.bytes = 0

    def append(self, frame: bytes):
        with self.path.open("ab") as f:
            f.write(frame)
        self.frames += 1
        self.bytes += len(frame)


def read_stream(path: Union[str, Path]) -> list[bytes]:
    """Frames of a sidecar stream file, each with its length prefix."""
    return [encode_frame(payload) for payload in iter_frames(Path(path).read_bytes())]
