"""Versioned binary container: magic, JSON header, payload, CRC32 checksum.

Dataset files, denoiser checkpoints, and sample files all share this layout
so corruption, truncation, and version skew fail loudly on load.

Layout: ``MAGIC (4 bytes) | version (u16 LE) | header_len (u64 LE) |
header JSON (utf-8) | payload``. The header always carries ``kind``,
``payload_size`` and ``payload_crc32``.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

MAGIC = b"NMIX"
FORMAT_VERSION = 1

__all__ = ["ContainerError", "write_container", "read_container", "canonical_json"]


class ContainerError(Exception):
    """Raised for malformed, truncated, corrupted, or mismatched files."""


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_container(path, kind: str, header: dict, payload: bytes) -> None:
    """Write a container file atomically (temp file + rename)."""
    full_header = dict(header)
    full_header["kind"] = kind
    full_header["payload_size"] = len(payload)
    full_header["payload_crc32"] = zlib.crc32(payload)
    header_bytes = canonical_json(full_header).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
    tmp.replace(path)


def read_container(path, kind: str | None = None) -> tuple[dict, bytes]:
    """Read and verify a container file.

    Args:
        path: File to read.
        kind: If given, the header's ``kind`` must match.

    Returns:
        ``(header, payload)``.

    Raises:
        ContainerError: On bad magic, version mismatch, truncation,
            checksum failure, or kind mismatch.
    """
    path = Path(path)
    data = path.read_bytes()
    prefix_len = len(MAGIC) + 2 + 8
    if len(data) < prefix_len:
        raise ContainerError(f"{path}: truncated file (only {len(data)} bytes)")
    if data[: len(MAGIC)] != MAGIC:
        raise ContainerError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<H", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: version mismatch (file {version}, expected {FORMAT_VERSION})")
    (header_len,) = struct.unpack_from("<Q", data, len(MAGIC) + 2)
    if len(data) < prefix_len + header_len:
        raise ContainerError(f"{path}: truncated header")
    try:
        header = json.loads(data[prefix_len : prefix_len + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"{path}: unreadable header: {e}") from e
    payload = data[prefix_len + header_len :]
    if len(payload) != header.get("payload_size"):
        raise ContainerError(
            f"{path}: truncated payload ({len(payload)} bytes, header says {header.get('payload_size')})"
        )
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise ContainerError(f"{path}: checksum failure")
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected kind {kind!r}, found {header.get('kind')!r}")
    return header, payload
