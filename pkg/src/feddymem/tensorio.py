"""Binary tensor serialization.

Single tensor ("FDM1"): magic bytes b"FDM1", u8 rank, rank x u32 little-endian
extents, then the row-major float32 little-endian payload.

Container ("FDMC"): magic b"FDMC", u32 section count, then per section a u16
name length, the UTF-8 name, and an embedded FDM1 blob. Used for parameter
checkpoints and multi-level feature pyramids.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from .errors import NumericError, ShapeError

MAGIC = b"FDM1"
CONTAINER_MAGIC = b"FDMC"
MAX_RANK = 4


def tensor_nbytes(shape: tuple[int, ...]) -> int:
    """Serialized size of a tensor with the given extents, header included."""
    rank = len(shape)
    count = 1
    for d in shape:
        count *= int(d)
    return len(MAGIC) + 1 + 4 * rank + 4 * count


def dump_tensor(arr: np.ndarray) -> bytes:
    if arr.ndim < 1 or arr.ndim > MAX_RANK:
        raise ShapeError(f"tensor rank must be 1-{MAX_RANK}, got {arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
    payload = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<B", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + payload.tobytes()


def load_tensor(buf: bytes | memoryview, check_finite: bool = True) -> np.ndarray:
    buf = memoryview(buf)
    arr, consumed = _read_tensor_at(buf, 0, check_finite)
    if consumed != len(buf):
        raise ShapeError(f"trailing bytes after tensor payload ({len(buf) - consumed})")
    return arr


def _read_tensor_at(buf: memoryview, offset: int, check_finite: bool) -> tuple[np.ndarray, int]:
    if bytes(buf[offset:offset + 4]) != MAGIC:
        raise ShapeError("bad magic: not an FDM1 tensor")
    offset += 4
    rank = buf[offset]
    offset += 1
    if rank < 1 or rank > MAX_RANK:
        raise ShapeError(f"tensor rank must be 1-{MAX_RANK}, got {rank}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    if any(d < 1 for d in shape):
        raise ShapeError(f"tensor extents must be >= 1, got {shape}")
    count = int(np.prod(shape, dtype=np.int64))
    end = offset + 4 * count
    if end > len(buf):
        raise ShapeError("truncated tensor payload")
    arr = np.frombuffer(buf[offset:end], dtype="<f4").reshape(shape).copy()
    if check_finite and not np.isfinite(arr).all():
        raise NumericError("tensor payload contains non-finite values")
    return arr, end


def write_tensor(path: str | Path, arr: np.ndarray) -> int:
    """Write one tensor; returns the number of bytes written."""
    data = dump_tensor(arr)
    Path(path).write_bytes(data)
    return len(data)


def read_tensor(path: str | Path, check_finite: bool = True) -> np.ndarray:
    return load_tensor(Path(path).read_bytes(), check_finite=check_finite)


def dump_container(sections: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CONTAINER_MAGIC)
    out.write(struct.pack("<I", len(sections)))
    for name, arr in sections.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise ValueError(f"section name too long: {name!r}")
        out.write(struct.pack("<H", len(encoded)))
        out.write(encoded)
        out.write(dump_tensor(arr))
    return out.getvalue()


def load_container(buf: bytes, check_finite: bool = True) -> dict[str, np.ndarray]:
    view = memoryview(buf)
    if bytes(view[:4]) != CONTAINER_MAGIC:
        raise ShapeError("bad magic: not an FDMC container")
    (count,) = struct.unpack_from("<I", view, 4)
    offset = 8
    sections: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", view, offset)
        offset += 2
        name = bytes(view[offset:offset + name_len]).decode("utf-8")
        offset += name_len
        arr, offset = _read_tensor_at(view, offset, check_finite)
        sections[name] = arr
    if offset != len(view):
        raise ShapeError(f"trailing bytes after container payload ({len(view) - offset})")
    return sections


def write_container(path: str | Path, sections: dict[str, np.ndarray]) -> int:
    data = dump_container(sections)
    Path(path).write_bytes(data)
    return len(data)


def read_container(path: str | Path, check_finite: bool = True) -> dict[str, np.ndarray]:
    return load_container(Path(path).read_bytes(), check_finite=check_finite)
