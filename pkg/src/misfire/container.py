"""Little-endian binary container with magic bytes, a JSON header, and
named float64 array blocks. Round-trips arrays bit-exactly.

Layout:
    magic      4 bytes
    version    u32
    header     u32 length + UTF-8 JSON
    blocks     u32 count, then per block:
                   u16 name length + UTF-8 name
                   u8 ndim + u32 per extent
                   float64 data, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """A serialized file is malformed; the message carries the byte offset."""


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DataFormatError(
                f"{self.path}: truncated while reading {what}: needed {n} bytes "
                f"at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 4:
        raise ValueError("magic must be exactly 4 bytes")
    parts = [magic, struct.pack("<I", FORMAT_VERSION)]
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(hdr)))
    parts.append(hdr)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        for ext in arr.shape:
            parts.append(struct.pack("<I", ext))
        parts.append(arr.astype("<f8").tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    r = _Reader(data, path)
    got = r.take(4, "magic")
    if got != magic:
        raise DataFormatError(
            f"{path}: bad magic at offset 0: expected {magic!r}, found {got!r}"
        )
    version = r.u32("version")
    if version != FORMAT_VERSION:
        raise DataFormatError(
            f"{path}: unsupported container version {version}, this build reads "
            f"version {FORMAT_VERSION}"
        )
    hdr_len = r.u32("header length")
    hdr_off = r.pos
    try:
        header = json.loads(r.take(hdr_len, "header").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: invalid header JSON at offset {hdr_off}: {exc}") from exc
    arrays: dict[str, np.ndarray] = {}
    count = r.u32("block count")
    for b in range(count):
        name_len = r.u16(f"block {b} name length")
        name = r.take(name_len, f"block {b} name").decode("utf-8")
        ndim = r.u8(f"block {b} ndim")
        shape = tuple(r.u32(f"block {b} extent") for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        raw = r.take(8 * size, f"block {b} ({name}) data")
        arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(data):
        raise DataFormatError(
            f"{path}: {len(data) - r.pos} trailing bytes at offset {r.pos}"
        )
    return header, arrays
