"""Binary formats: the ``FPT1`` tensor and the sectioned ``FPRF`` container.

FPT1: ``b"FPT1"``, u32 rank, rank x u32 dims, little-endian float32 payload
in row-major order.

FPRF container::

    b"FPRF"  u32 version  u32 n_sections
    per section:
        4-byte tag  u64 payload_len  u32 crc32(tag + payload)
        payload = u32 json_len, json meta (utf-8), u32 n_tensors, FPT1 tensors...
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

TENSOR_MAGIC = b"FPT1"
CONTAINER_MAGIC = b"FPRF"
CONTAINER_VERSION = 1


class ContainerError(ValueError):
    """Malformed, truncated or corrupted binary file."""


def encode_tensor(arr) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def decode_tensor(buf, offset=0):
    """Decode one tensor at ``offset``; returns ``(array, next_offset)``."""
    if buf[offset : offset + 4] != TENSOR_MAGIC:
        raise ContainerError(f"bad tensor magic at byte {offset}")
    if offset + 8 > len(buf):
        raise ContainerError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if pos + 4 * rank > len(buf):
        raise ContainerError("truncated tensor dims")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(dims, dtype=np.int64))
    if pos + 4 * n > len(buf):
        raise ContainerError("truncated tensor payload")
    arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
    return arr, pos + 4 * n


def atomic_write_bytes(path, data: bytes):
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_tensor(path, arr):
    atomic_write_bytes(path, encode_tensor(arr))


def read_tensor(path):
    with open(path, "rb") as f:
        buf = f.read()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise ContainerError(f"{path}: trailing bytes after tensor")
    return arr


def encode_section(meta: dict, tensors) -> bytes:
    js = json.dumps(meta, sort_keys=True).encode()
    parts = [struct.pack("<I", len(js)), js, struct.pack("<I", len(tensors))]
    parts.extend(encode_tensor(t) for t in tensors)
    return b"".join(parts)


def decode_section(payload):
    (jl,) = struct.unpack_from("<I", payload, 0)
    meta = json.loads(payload[4 : 4 + jl].decode())
    pos = 4 + jl
    (nt,) = struct.unpack_from("<I", payload, pos)
    pos += 4
    tensors = []
    for _ in range(nt):
        t, pos = decode_tensor(payload, pos)
        tensors.append(t)
    if pos != len(payload):
        raise ContainerError("section payload has trailing bytes")
    return meta, tensors


def encode_container(sections: dict) -> bytes:
    """``sections`` maps a 4-char tag to ``(meta, tensors)``; insertion order is kept."""
    out = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(sections))]
    for tag, (meta, tensors) in sections.items():
        tb = tag.encode("ascii")
        if len(tb) != 4:
            raise ValueError(f"section tag must be 4 ASCII chars: {tag!r}")
        payload = encode_section(meta, tensors)
        out.append(tb + struct.pack("<QI", len(payload), zlib.crc32(payload, zlib.crc32(tb))))
        out.append(payload)
    return b"".join(out)


def decode_container(buf) -> dict:
    if len(buf) < 12 or buf[:4] != CONTAINER_MAGIC:
        raise ContainerError("not an FPRF container (bad magic)")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    pos = 12
    sections = {}
    for _ in range(n):
        if pos + 16 > len(buf):
            raise ContainerError("truncated section header")
        tag_bytes = bytes(buf[pos : pos + 4])
        tag = tag_bytes.decode("ascii", errors="replace")
        length, crc = struct.unpack_from("<QI", buf, pos + 4)
        pos += 16
        payload = buf[pos : pos + length]
        if len(payload) != length:
            raise ContainerError(f"section {tag}: truncated payload")
        if zlib.crc32(payload, zlib.crc32(tag_bytes)) != crc:
            raise ContainerError(f"section {tag}: checksum mismatch")
        try:
            sections[tag] = decode_section(payload)
        except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ContainerError(f"section {tag}: {e}") from e
        pos += length
    if pos != len(buf):
        raise ContainerError("trailing bytes after last section")
    return sections


def write_container(path, sections: dict):
    atomic_write_bytes(path, encode_container(sections))


def read_container(path) -> dict:
    try:
        with open(path, "rb") as f:
            buf = f.read()
    except OSError as e:
        raise ContainerError(f"{path}: {e}") from e
    return decode_container(buf)
