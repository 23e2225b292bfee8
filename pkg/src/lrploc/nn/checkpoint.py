"""Portable checkpoint files.

Byte layout (all integers little-endian)::

    magic        8 bytes   b"LRPCKPT\\0"
    version      u32       FORMAT_VERSION
    fingerprint  32 bytes  sha256 of the graph architecture
    meta_len     u64
    meta         meta_len bytes, UTF-8 JSON
    n_arrays     u32
    n_arrays x:
        name_len u16, name (UTF-8)
        dtype    u8        1 = float32, 2 = float64, 3 = int64
        ndim     u8, dims  ndim x u64
        data     little-endian, C order
    checksum     32 bytes  sha256 of every preceding byte

The checksum is verified before anything is parsed, so a truncated or
corrupted file never leaves a graph partially loaded.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LRPCKPT\0"
FORMAT_VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass


def write_checkpoint(path, fingerprint: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), bytes.fromhex(fingerprint)]
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    parts += [struct.pack("<Q", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
        enc = name.encode()
        parts += [struct.pack("<H", len(enc)), enc, struct.pack("<BB", code, arr.ndim)]
        parts += [struct.pack("<Q", d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    body = b"".join(parts)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def read_checkpoint(path, fingerprint: str | None = None):
    """Return ``(arrays, meta)``; validates checksum, version and fingerprint."""
    blob = Path(path).read_bytes()
    header = len(MAGIC) + 4 + 32 + 8
    if len(blob) < header + 4 + 32:
        raise TruncatedCheckpoint(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise TruncatedCheckpoint(f"{path}: checksum mismatch (truncated or corrupted)")
    (version,) = struct.unpack_from("<I", body, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    file_fp = body[len(MAGIC) + 4:len(MAGIC) + 36].hex()
    if fingerprint is not None and file_fp != fingerprint:
        raise FingerprintMismatch(f"{path}: architecture fingerprint {file_fp[:12]}… does not match {fingerprint[:12]}…")
    off = len(MAGIC) + 36
    try:
        (mlen,) = struct.unpack_from("<Q", body, off)
        off += 8
        meta = json.loads(body[off:off + mlen].decode())
        off += mlen
        (n,) = struct.unpack_from("<I", body, off)
        off += 4
        arrays = {}
        for _ in range(n):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}Q", body, off)
            off += 8 * ndim
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(body):
                raise TruncatedCheckpoint(f"{path}: array {name} runs past end of file")
            arrays[name] = np.frombuffer(body, dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).astype(dt.newbyteorder("="))
            off += nbytes
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    if off != len(body):
        raise CheckpointError(f"{path}: {len(body) - off} trailing bytes")
    return arrays, meta


def save_weights(graph, path, extra_meta: dict | None = None) -> None:
    meta = {"graph": graph.name, "graph_meta": graph.meta, **(extra_meta or {})}
    write_checkpoint(path, graph.fingerprint(), graph.parameters(), meta)


def load_weights(graph, path) -> dict:
    arrays, meta = read_checkpoint(path, graph.fingerprint())
    params = {k: v for k, v in arrays.items() if k in graph.parameters()}
    missing = set(graph.parameters()) - set(params)
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)[:3]}")
    graph.set_parameters(params)
    return meta
