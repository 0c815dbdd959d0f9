"""Versioned single-file parameter container: JSON header + named flat f64 arrays.

Layout: magic line, one UTF-8 JSON header line holding user metadata and the
array manifest (name, shape in storage order), then the raw little-endian
float64 bytes of every array in manifest order. The writer is byte-stable so
identical state always produces identical files, and the loader validates the
whole file before returning anything.
"""

from __future__ import annotations

import json

import numpy as np

from .common import CheckpointError, atomic_write_bytes, canonical_json

MAGIC = b"PATHDISC-CKPT-1\n"
FORMAT_VERSION = 1


def checkpoint_bytes(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    names = sorted(arrays)
    manifest = []
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = canonical_json({"format_version": FORMAT_VERSION, "meta": meta, "arrays": manifest})
    return MAGIC + header.encode("utf-8") + b"\n" + b"".join(blobs)


def save_checkpoint(path: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    atomic_write_bytes(path, checkpoint_bytes(meta, arrays))


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    newline = blob.find(b"\n", len(MAGIC))
    if newline < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[len(MAGIC) : newline].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    if not isinstance(header, dict) or header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    manifest = header.get("arrays")
    meta = header.get("meta")
    if not isinstance(manifest, list) or not isinstance(meta, dict):
        raise CheckpointError(f"{path}: malformed header")
    offset = newline + 1
    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        name = entry.get("name")
        shape = tuple(entry.get("shape", ()))
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: array {name!r} extends past end of file")
        arrays[name] = np.frombuffer(blob[offset : offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after arrays")
    return meta, arrays


def require_shapes(path_label: str, arrays: dict[str, np.ndarray], expected: dict[str, tuple[int, ...]]) -> None:
    """Validate that exactly the expected arrays are present with exact shapes."""
    missing = sorted(set(expected) - set(arrays))
    if missing:
        raise CheckpointError(f"{path_label}: missing arrays {missing}")
    surplus = sorted(set(arrays) - set(expected))
    if surplus:
        raise CheckpointError(f"{path_label}: unexpected arrays {surplus}")
    for name, shape in expected.items():
        if arrays[name].shape != tuple(shape):
            raise CheckpointError(
                f"{path_label}: array {name!r} has shape {arrays[name].shape}, expected {tuple(shape)}"
            )
