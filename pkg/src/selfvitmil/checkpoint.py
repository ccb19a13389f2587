"""Self-describing binary containers for model weights and slide embeddings.

Layout (little endian)::

    magic      8 bytes   b"SVMILCK\\0" (weights) or b"SVMILEM\\0" (embeddings)
    version    uint32
    header     uint32 length + UTF-8 JSON (sorted keys)
    count      uint32 number of blobs
    blob*      uint16 name length + UTF-8 name, uint8 ndim, uint64 * ndim shape,
               float64 * prod(shape) row-major data

Float data is written verbatim, so a save/load round trip is bit exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
WEIGHTS_MAGIC = b"SVMILCK\0"
EMBED_MAGIC = b"SVMILEM\0"


class FormatError(ValueError):
    pass


class VersionError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def _pack(magic: bytes, header: dict, blobs: dict) -> bytes:
    head = canonical_json(header).encode()
    parts = [magic, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(head)), head,
             struct.pack("<I", len(blobs))]
    for name, arr in blobs.items():
        arr = np.asarray(arr, dtype="<f8", order="C")
        key = name.encode()
        parts += [struct.pack("<H", len(key)), key, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def _unpack(raw: bytes, magic: bytes):
    if raw[:8] != magic:
        raise FormatError(f"bad magic {raw[:8]!r}, expected {magic!r}")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != FORMAT_VERSION:
        raise VersionError(f"container version {version} not supported (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack_from("<I", raw, 12)
    pos = 16
    header = json.loads(raw[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    blobs = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        blobs[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes")
    return header, blobs


def save_weights(path, header: dict, weights: dict) -> None:
    Path(path).write_bytes(_pack(WEIGHTS_MAGIC, header, weights))


def load_weights(path) -> tuple[dict, dict]:
    return _unpack(Path(path).read_bytes(), WEIGHTS_MAGIC)


def save_embeddings(path, slide_id: str, embeddings: np.ndarray, extra: dict | None = None) -> None:
    embeddings = np.asarray(embeddings, dtype=float)
    n, k = embeddings.shape
    header = {"slide_id": slide_id, "n_inst": n, "k": k, **(extra or {})}
    Path(path).write_bytes(_pack(EMBED_MAGIC, header, {"embeddings": embeddings}))


def load_embeddings(path) -> tuple[dict, np.ndarray]:
    header, blobs = _unpack(Path(path).read_bytes(), EMBED_MAGIC)
    emb = blobs["embeddings"]
    if emb.shape != (header["n_inst"], header["k"]):
        raise FormatError(f"embedding block {emb.shape} disagrees with header "
                          f"({header['n_inst']}, {header['k']})")
    return header, emb


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
