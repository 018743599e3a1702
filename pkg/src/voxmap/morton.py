"""Morton (Z-order) interleaving of 21-bit x/y/z grid indices into 63-bit codes."""

import numpy as np

MAX_AXIS_BITS = 21
_AXIS_MASK = (1 << MAX_AXIS_BITS) - 1


def _spread(n: int) -> int:
    n &= _AXIS_MASK
    n = (n | n << 32) & 0x1F00000000FFFF
    n = (n | n << 16) & 0x1F0000FF0000FF
    n = (n | n << 8) & 0x100F00F00F00F00F
    n = (n | n << 4) & 0x10C30C30C30C30C3
    return (n | n << 2) & 0x1249249249249249


def _compact(n: int) -> int:
    n &= 0x1249249249249249
    n = (n ^ (n >> 2)) & 0x10C30C30C30C30C3
    n = (n ^ (n >> 4)) & 0x100F00F00F00F00F
    n = (n ^ (n >> 8)) & 0x1F0000FF0000FF
    n = (n ^ (n >> 16)) & 0x1F00000000FFFF
    return (n ^ (n >> 32)) & _AXIS_MASK


def encode(x: int, y: int, z: int) -> int:
    return _spread(x) | (_spread(y) << 1) | (_spread(z) << 2)


def decode(morton: int) -> tuple[int, int, int]:
    return _compact(morton), _compact(morton >> 1), _compact(morton >> 2)


def _spread_array(n: np.ndarray) -> np.ndarray:
    n = n.astype(np.uint64) & np.uint64(_AXIS_MASK)
    n = (n | n << np.uint64(32)) & np.uint64(0x1F00000000FFFF)
    n = (n | n << np.uint64(16)) & np.uint64(0x1F0000FF0000FF)
    n = (n | n << np.uint64(8)) & np.uint64(0x100F00F00F00F00F)
    n = (n | n << np.uint64(4)) & np.uint64(0x10C30C30C30C30C3)
    return (n | n << np.uint64(2)) & np.uint64(0x1249249249249249)


def encode_array(indices: np.ndarray) -> np.ndarray:
    """Encode an (N, 3) array of non-negative grid indices."""
    return (
        _spread_array(indices[:, 0])
        | (_spread_array(indices[:, 1]) << np.uint64(1))
        | (_spread_array(indices[:, 2]) << np.uint64(2))
    )


def depth_mask(depth: int) -> int:
    """Bits of a morton code that must be zero for a code at `depth`."""
    return (1 << (3 * depth)) - 1
