"""Shared plumbing: error types, deterministic RNG streams, atomic file IO."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile

import numpy as np


class PathdiscError(Exception):
    """Base class for all errors raised by this package."""


class InputError(PathdiscError):
    """Invalid input: bad file, bad schema, bad flag value, infeasible config."""


class ShapeError(InputError):
    """Tensor shapes incompatible for the requested operation."""


class MiningError(PathdiscError):
    """Negative mining could not satisfy its constraints."""


class TrainingError(PathdiscError):
    """Training aborted (non-finite loss or inconsistent state)."""


class CheckpointError(InputError):
    """Checkpoint file is corrupt or incompatible."""


class MetricError(InputError):
    """Metric undefined for the given input (e.g. single-class AUC)."""


def rng_for(*key) -> np.random.Generator:
    """Deterministic PCG64 stream derived from an arbitrary key tuple.

    Keys may mix ints and strings; identical keys always yield identical
    streams, independent of process hash seed.
    """
    digest = hashlib.sha256(repr(key).encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "big") for i in range(0, 32, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def canonical_json(obj) -> str:
    """JSON with sorted keys and no whitespace drift; used for hashing and artifacts."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def atomic_write_bytes(path: str, data: bytes) -> None:
    """Write via a temp file in the same directory and rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def thread_cap() -> int:
    """Worker-count cap from PATHDISC_THREADS (>=1). All pipelines stay within it."""
    raw = os.environ.get("PATHDISC_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        value = int(raw)
    except ValueError:
        raise InputError(f"PATHDISC_THREADS must be a positive integer, got {raw!r}")
    if value < 1:
        raise InputError(f"PATHDISC_THREADS must be >= 1, got {value}")
    return value
