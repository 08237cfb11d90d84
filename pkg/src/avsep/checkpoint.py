"""Versioned binary container for model parameters.

One format is shared by every parameter bundle in the package (frozen
extractors, separator, discriminators). Layout:

    magic (8 bytes) | version (u32 LE) | header length (u64 LE)
    | header JSON (utf-8) | raw arrays, C order, little-endian
    | sha256 of everything above (32 bytes)

The header records a ``kind`` tag, free-form ``meta`` (config, seeds,
accuracy reports) and the array manifest in storage order. Arrays round
trip byte-identically.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

MAGIC = b"AVSEPCKP"
VERSION = 1


class CheckpointError(Exception):
    """Base error for checkpoint I/O."""


class CorruptCheckpointError(CheckpointError):
    """File is truncated, has a bad magic/manifest, or fails its checksum."""


class VersionMismatchError(CheckpointError):
    """File was written by an incompatible format version."""


def save_arrays(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays plus metadata to ``path``."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        le = arr.dtype.newbyteorder("<")
        blob = arr.astype(le, copy=False).tobytes()
        manifest.append({"name": name, "dtype": le.str, "shape": list(arr.shape)})
        blobs.append(blob)
    header = json.dumps({"kind": kind, "meta": meta, "arrays": manifest}).encode("utf-8")

    body = bytearray()
    body += MAGIC
    body += VERSION.to_bytes(4, "little")
    body += len(header).to_bytes(8, "little")
    body += header
    for blob in blobs:
        body += blob
    body += hashlib.sha256(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)


def load_arrays(path, expected_kind: str | None = None) -> tuple[str, dict, dict[str, np.ndarray]]:
    """Read a container written by :func:`save_arrays`.

    Returns ``(kind, meta, arrays)``. Raises :class:`CorruptCheckpointError`
    on truncation or checksum failure and :class:`VersionMismatchError` on a
    format version this code does not understand.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 12 + 32:
        raise CorruptCheckpointError(f"{path}: file too short to be a checkpoint")
    if data[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: bad magic bytes")
    digest = data[-32:]
    if hashlib.sha256(data[:-32]).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or modified)")

    pos = len(MAGIC)
    version = int.from_bytes(data[pos : pos + 4], "little")
    pos += 4
    if version != VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {VERSION}")
    header_len = int.from_bytes(data[pos : pos + 8], "little")
    pos += 8
    try:
        header = json.loads(data[pos : pos + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header: {exc}") from exc
    pos += header_len

    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(
            f"{path}: kind {header.get('kind')!r}, expected {expected_kind!r}"
        )

    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
        chunk = data[pos : pos + nbytes]
        if len(chunk) != nbytes:
            raise CorruptCheckpointError(f"{path}: array {entry['name']!r} truncated")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        pos += nbytes
    if pos != len(data) - 32:
        raise CorruptCheckpointError(f"{path}: trailing bytes after array payload")
    return header["kind"], header["meta"], arrays
