"""Parameter container: magic, length-prefixed JSON manifest, raw float64 payload.

Layout::

    b"LEUQPRM1"                     8 bytes
    manifest length (uint64, LE)    8 bytes
    manifest (UTF-8 JSON)           names, shapes, byte offsets, CRC32, meta
    payload                         concatenated little-endian float64 arrays
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import ChecksumError, FormatError, VersionError

MAGIC = b"LEUQPRM1"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def save_params(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, arr in params.items():
        buf = np.ascontiguousarray(arr, dtype=_LE_F64).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tensors": entries,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode()
    Path(path).write_bytes(MAGIC + struct.pack("<Q", len(head)) + head + payload)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: not a parameter container (bad magic)")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable manifest") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported container version {manifest.get('format_version')!r}")
    payload = raw[16 + n :]
    if len(payload) != manifest["payload_bytes"]:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {manifest['payload_bytes']} bytes)")
    if zlib.crc32(payload) != manifest["crc32"]:
        raise ChecksumError(f"{path}: payload checksum mismatch")
    params = {}
    for e in manifest["tensors"]:
        chunk = payload[e["offset"] : e["offset"] + e["nbytes"]]
        params[e["name"]] = np.frombuffer(chunk, dtype=_LE_F64).astype(np.float64).reshape(e["shape"])
    return params, manifest["meta"]
