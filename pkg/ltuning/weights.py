"""
LTW1 weight files.

Layout:
    b"LTW1" | header length (uint32 LE) | JSON header | f32 LE payload

The header lists every tensor as {name, shape, dtype: "f32", byte_offset}
together with the config needed to rebuild the owner, a CRC32 of the
payload and the payload size. Backbones and adapters share the format; an
adapter header also carries `method`.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

import numpy as np

from .errors import WeightChecksumError, WeightFormatError, WeightTruncatedError, WeightVersionError
from .fileio import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b'LTW1'
FORMAT_VERSION = 1
RESERVED_KEYS = {'version', 'config', 'tensors', 'crc32', 'payload_bytes'}


@dataclass
class WeightFile:
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    extras: Dict[str, Any] = field(default_factory=dict)


def encode_weights(tensors: Mapping[str, np.ndarray], config: Mapping[str, Any],
                   extras: Optional[Mapping[str, Any]] = None) -> bytes:
    extras = dict(extras or {})
    clash = RESERVED_KEYS & set(extras)
    if clash:
        raise ValueError(f"header extras may not override {sorted(clash)}")

    entries = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype='<f4').tobytes()
        entries.append({'name': name, 'shape': list(np.shape(arr)), 'dtype': 'f32', 'byte_offset': offset})
        chunks.append(raw)
        offset += len(raw)
    payload = b''.join(chunks)

    header = {
        'version': FORMAT_VERSION,
        'config': dict(config),
        'tensors': entries,
        'crc32': zlib.crc32(payload),
        'payload_bytes': len(payload),
        **extras,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + struct.pack('<I', len(header_bytes)) + header_bytes + payload


def decode_weights(blob: bytes) -> WeightFile:
    """Parse and verify a whole file image; nothing is returned on failure."""
    if len(blob) < 8 or blob[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (header_len,) = struct.unpack('<I', blob[4:8])
    if len(blob) < 8 + header_len:
        raise WeightTruncatedError(f"header needs {header_len} bytes, file has {len(blob) - 8}")
    try:
        header = json.loads(blob[8:8 + header_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise WeightFormatError(f"unreadable header: {e}") from None
    if not isinstance(header, dict):
        raise WeightFormatError("header is not a JSON object")

    version = header.get('version')
    if version != FORMAT_VERSION:
        raise WeightVersionError(f"unsupported weight file version {version}, expected {FORMAT_VERSION}")

    try:
        expected = int(header['payload_bytes'])
        crc = int(header['crc32'])
        entries = list(header['tensors'])
        config = dict(header['config'])
    except (KeyError, TypeError, ValueError) as e:
        raise WeightFormatError(f"header missing field: {e}") from None

    payload = blob[8 + header_len:]
    if len(payload) < expected:
        raise WeightTruncatedError(f"payload has {len(payload)} bytes, header declares {expected}")
    if len(payload) > expected:
        raise WeightFormatError(f"{len(payload) - expected} trailing bytes after payload")
    if zlib.crc32(payload) != crc:
        raise WeightChecksumError(f"payload CRC32 {zlib.crc32(payload):#010x} != header {crc:#010x}")

    tensors: Dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name = entry['name']
            shape = tuple(int(s) for s in entry['shape'])
            start = int(entry['byte_offset'])
        except (KeyError, TypeError, ValueError) as e:
            raise WeightFormatError(f"bad tensor entry {entry!r}: {e}") from None
        if entry.get('dtype') != 'f32':
            raise WeightFormatError(f"tensor '{name}' has dtype {entry.get('dtype')!r}, only f32 is supported")
        count = int(np.prod(shape, dtype=np.int64))
        end = start + 4 * count
        if start < 0 or end > len(payload):
            raise WeightFormatError(f"tensor '{name}' bytes [{start}, {end}) fall outside the payload")
        tensors[name] = np.frombuffer(payload[start:end], dtype='<f4').astype(np.float32).reshape(shape)

    extras = {k: v for k, v in header.items() if k not in RESERVED_KEYS}
    return WeightFile(config=config, tensors=tensors, extras=extras)


def write_weight_file(path: PathLike, tensors: Mapping[str, np.ndarray], config: Mapping[str, Any],
                      extras: Optional[Mapping[str, Any]] = None) -> Path:
    blob = encode_weights(tensors, config, extras)
    out = atomic_write_bytes(path, blob)
    logger.info(f"[SAVED] {out} ({len(tensors)} tensors, {len(blob)} bytes)")
    return out


def read_weight_file(path: PathLike) -> WeightFile:
    with open(path, 'rb') as f:
        blob = f.read()
    return decode_weights(blob)
