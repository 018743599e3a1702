"""Delta publishing over TCP.

The server sends every recorded delta frame to each subscriber, followed by an
end-of-stream marker. Subscribers apply frames one at a time, so a frame cut off by
a dropped connection never reaches the replica.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Union

import anyio
from anyio.abc import ByteReceiveStream, SocketAttribute, TaskStatus
from anyio.streams.buffered import BufferedByteReceiveStream

from voxmap.codec import END_OF_STREAM, LENGTH, apply_delta, encode_frame, iter_frames
from voxmap.errors import ConnectionLost, CorruptStream
from voxmap.octree import OccupancyMap

logger = logging.getLogger(__name__)


class DeltaSource(Protocol):
    def frames(self) -> Iterable[bytes]: ...


class RecordedDeltaSource:
    """Frames of a sidecar stream file, re-read for every subscriber."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def frames(self) -> Iterable[bytes]:
        return [encode_frame(payload) for payload in iter_frames(self.path.read_bytes())]


class MemoryDeltaSource:
    def __init__(self, frames: Iterable[bytes]):
        self._frames = list(frames)

    def frames(self) -> Iterable[bytes]:
        return self._frames


def parse_address(text: str) -> tuple[str, int]:
    host, separator, port = text.rpartition(":")
    if not separator:
        host, port = "127.0.0.1", text
    try:
        number = int(port)
    except ValueError:
        raise ValueError(f"invalid address {text!r}, expected HOST:PORT") from None
    if not 0 <= number < 65536:
        raise ValueError(f"port {number} out of range")
    return host or "127.0.0.1", number


async def serve(
    source: DeltaSource,
    host: str,
    port: int,
    once: bool = False,
    *,
    task_status: TaskStatus[int] = anyio.TASK_STATUS_IGNORED,
):
    """Serve `source` to subscribers; reports the bound port through `task_status`."""
    listener = await anyio.create_tcp_listener(local_host=host, local_port=port)
    async with listener:
        bound = listener.extra(SocketAttribute.local_port)
        logger.debug(f"serving deltas on {host}:{bound}")
        task_status.started(bound)
        async with anyio.create_task_group() as tg:

            async def handle(stream):
                async with stream:
                    sent = 0
                    try:
                        for frame in source.frames():
                            await stream.send(frame)
                            sent += 1
                        await stream.send(END_OF_STREAM)
                    except (anyio.BrokenResourceError, anyio.ClosedResourceError):
                        logger.warning(f"subscriber disconnected after {sent} frames")
                    else:
                        logger.debug(f"sent {sent} frames to a subscriber")
                if once:
                    tg.cancel_scope.cancel()

            await listener.serve(handle, task_group=tg)


async def receive_frame(receiver: BufferedByteReceiveStream, last_applied: int) -> Optional[bytes]:
    """Next framed delta, or None at the end-of-stream marker."""
    try:
        prefix = await receiver.receive_exactly(LENGTH.size)
    except (anyio.EndOfStream, anyio.IncompleteRead, anyio.BrokenResourceError) as e:
        raise ConnectionLost(last_applied) from e
    (length,) = LENGTH.unpack(prefix)
    if length == 0:
        return None
    try:
        payload = await receiver.receive_exactly(length)
    except (anyio.EndOfStream, anyio.IncompleteRead, anyio.BrokenResourceError) as e:
        raise CorruptStream(
            f"frame after delta {last_applied} truncated by a dropped connection"
        ) from e
    return encode_frame(payload)


@dataclass
class SubscribeResult:
    frames: int
    last_applied: int


async def consume(replica: OccupancyMap, stream: ByteReceiveStream) -> SubscribeResult:
    receiver = BufferedByteReceiveStream(stream)
    frames = 0
    while True:
        frame = await receive_frame(receiver, replica.delta_seq)
        if frame is None:
            return SubscribeResult(frames, replica.delta_seq)
        apply_delta(replica, frame)
        frames += 1


async def subscribe(replica: OccupancyMap, host: str, port: int) -> SubscribeResult:
    try:
        stream = await anyio.connect_tcp(host, port)
    except OSError as e:
        raise ConnectionLost(replica.delta_seq) from e
    async with stream:
        logger.debug(f"subscribed to {host}:{port}")
        result = await consume(replica, stream)
    logger.debug(f"stream ended after {result.frames} frames, last delta {result.last_applied}")
    return result
