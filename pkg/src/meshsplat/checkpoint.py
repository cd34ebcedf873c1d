"""Versioned binary checkpoint container.

Layout (all little-endian): magic b"RMAV", u32 format version, u32 section
count, then a table of (8-byte padded name, u64 offset, u64 length, u32 crc32)
entries, then the section payloads. Each payload is a packed list of named
numpy arrays: u32 array count, then per array u16+name, u16+dtype string,
u8 ndim, u64 dims, raw C-order bytes. Writes are atomic (temp file + rename).
"""

from __future__ import annotations

import os
import struct
import zlib

import numpy as np

from .errors import CheckpointCorruptError, CheckpointVersionError

MAGIC = b"RMAV"
FORMAT_VERSION = 1
_NAME_BYTES = 8


def pack_arrays(arrays):
    """arrays: list of (name, ndarray) -> payload bytes."""
    parts = [struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        arr = np.asarray(arr)  # keeps 0-d scalars 0-d; tobytes emits C order
        nb = name.encode()
        db = arr.dtype.str.encode()
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<H", len(db)) + db)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        parts.append(arr.tobytes())
    return b"".join(parts)


def unpack_arrays(payload):
    """Inverse of pack_arrays; returns ordered list of (name, ndarray)."""
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(payload):
            raise CheckpointCorruptError("section payload truncated")
        chunk = payload[off:off + n]
        off += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out = []
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (dlen,) = struct.unpack("<H", take(2))
        dtype = np.dtype(take(dlen).decode())
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim \
            else dtype.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dtype).reshape(shape).copy()
        out.append((name, arr))
    return out


def write_sections(path, sections):
    """sections: ordered list of (name, payload_bytes)."""
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, len(sections))
    table_size = len(sections) * (_NAME_BYTES + 8 + 8 + 4)
    offset = len(header) + table_size
    table = b""
    blobs = b""
    for name, payload in sections:
        nb = name.encode()
        if len(nb) > _NAME_BYTES:
            raise ValueError(f"section name too long: {name}")
        table += nb.ljust(_NAME_BYTES, b"\0")
        table += struct.pack("<QQI", offset, len(payload),
                             zlib.crc32(payload) & 0xFFFFFFFF)
        blobs += payload
        offset += len(payload)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(header + table + blobs)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_sections(path):
    """Returns {name: payload_bytes}; validates version, lengths and CRCs."""
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    version, count = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, reader supports {FORMAT_VERSION}")
    entry = _NAME_BYTES + 8 + 8 + 4
    table_end = 12 + count * entry
    if len(data) < table_end:
        raise CheckpointCorruptError(f"{path}: truncated section table")
    sections = {}
    for i in range(count):
        base = 12 + i * entry
        name = data[base:base + _NAME_BYTES].rstrip(b"\0").decode()
        offset, length, crc = struct.unpack(
            "<QQI", data[base + _NAME_BYTES:base + entry])
        payload = data[offset:offset + length]
        if len(payload) != length:
            raise CheckpointCorruptError(f"{path}: section {name} truncated")
        if zlib.crc32(payload) & 0xFFFFFFFF != crc:
            raise CheckpointCorruptError(f"{path}: section {name} failed CRC")
        sections[name] = payload
    return sections
