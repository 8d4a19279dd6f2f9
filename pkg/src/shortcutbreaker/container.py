"""Binary container shared by datasets (``SBK1``) and checkpoints (``SBM1``).

Layout, all integers little-endian::

    magic          4 bytes
    header_len     uint32
    header         UTF-8 JSON, header_len bytes
    payload        raw bytes, length given by header["payload_nbytes"]
    crc32          uint32 over the payload bytes
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

from .exceptions import ChecksumError, TruncatedError, VersionError

FORMAT_VERSION = 1


def write_container(path, magic: bytes, header: dict, payload: bytes) -> None:
    header = dict(header, format_version=FORMAT_VERSION, payload_nbytes=len(payload))
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(payload)
        fh.write(struct.pack("<I", crc))
    os.replace(tmp, path)


def read_container(path, magic: bytes) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        if raw[:4] and raw[:4] != magic[: len(raw[:4])]:
            raise VersionError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
        raise TruncatedError(f"{path}: file too short for a container header")
    if raw[:4] != magic:
        raise VersionError(f"{path}: bad magic {raw[:4]!r}, expected {magic!r}")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise TruncatedError(f"{path}: unreadable header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionError(
            f"{path}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    start = 8 + hlen
    end = start + int(header["payload_nbytes"])
    if len(raw) < end + 4:
        raise TruncatedError(f"{path}: payload truncated ({len(raw)} bytes, need {end + 4})")
    payload = raw[start:end]
    (crc,) = struct.unpack("<I", raw[end:end + 4])
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    return header, payload
