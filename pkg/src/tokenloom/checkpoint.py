"""Binary checkpoint container with per-section CRC32 checksums.

Layout: magic, format version, JSON header (configs + vocab layout), then
named tensor sections. Tensors are little-endian float32, row-major; each
section records name, rank, dims, byte length, and a checksum of its
payload, so save -> load is bitwise and corruption is detected.
"""

from __future__ import annotations

import json
import os
import struct
import zlib

import numpy as np

from .errors import (
    CheckpointError,
    ChecksumError,
    SectionMissingError,
    TruncatedFileError,
    VersionError,
)

MAGIC = b"TLCK"
FORMAT_VERSION = 1


def save(path: str | os.PathLike, header: dict, tensors: dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header_raw)))
        fh.write(header_raw)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            payload = arr.tobytes()
            name_raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_raw)))
            fh.write(name_raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(struct.pack("<II", len(payload), zlib.crc32(payload) & 0xFFFFFFFF))
            fh.write(payload)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"checkpoint truncated at byte {self.pos}: {self.path}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            rd = _Reader(fh.read(), path)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint file not found: {path}") from exc
    if rd.take(4) != MAGIC:
        raise VersionError(f"not a checkpoint file (bad magic): {path}")
    version, header_len = rd.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    header = json.loads(rd.take(header_len).decode("utf-8"))
    (n_sections,) = rd.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_sections):
        (name_len,) = rd.unpack("<I")
        name = rd.take(name_len).decode("utf-8")
        (rank,) = rd.unpack("<I")
        shape = rd.unpack(f"<{rank}I") if rank else ()
        byte_len, crc = rd.unpack("<II")
        payload = rd.take(byte_len)
        if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
            raise ChecksumError(f"checksum mismatch in section {name!r} of {path}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
        tensors[name] = arr.copy()  # writable, independent of the file buffer
    return header, tensors


def require_sections(tensors: dict[str, np.ndarray], prefix: str, path: str = "") -> dict[str, np.ndarray]:
    """Subset of sections under ``prefix``; error if none exist."""
    found = {k: v for k, v in tensors.items() if k.startswith(prefix)}
    if not found:
        raise SectionMissingError(
            f"checkpoint {path or ''} has no sections under {prefix!r}", section=prefix
        )
    return found


def require_section(tensors: dict[str, np.ndarray], name: str, path: str = "") -> np.ndarray:
    if name not in tensors:
        raise SectionMissingError(f"checkpoint {path or ''} missing section {name!r}", section=name)
    return tensors[name]
