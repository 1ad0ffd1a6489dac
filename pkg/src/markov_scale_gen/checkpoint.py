"""Binary checkpoint container with a bit-exact round trip.

Layout: 8-byte magic, little-endian u32 header length, canonical JSON header
(config, step counter, RNG state, optimizer scalars, tensor directory with
byte offsets), then raw little-endian tensor payloads in directory order.
The directory is sorted by name and the JSON is emitted with sorted keys and
fixed separators, so identical logical content always produces identical
bytes. Writes take an exclusive lock file and land via atomic rename.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MSGCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or incompatible checkpoint file."""


@dataclass
class CheckpointData:
    config: dict
    step: int = 0
    rng_state: dict | None = None
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    opt_scalars: dict = field(default_factory=dict)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _little_endian(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return a


def save_checkpoint(path, data: CheckpointData) -> None:
    """Serialize atomically; a stale .lock file means another writer is live."""
    directory = []
    payloads = []
    offset = 0
    for name in sorted(data.tensors):
        arr = _little_endian(np.asarray(data.tensors[name]))
        raw = arr.tobytes()
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        payloads.append(raw)
        offset += len(raw)
    header = _canonical_json(
        {
            "version": FORMAT_VERSION,
            "config": data.config,
            "step": data.step,
            "rng": data.rng_state,
            "opt": data.opt_scalars,
            "tensors": directory,
        }
    )
    lock_path = str(path) + ".lock"
    tmp_path = str(path) + ".tmp"
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise CheckpointError(
            f"checkpoint {path} is locked by another writer ({lock_path} exists)"
        ) from e
    try:
        with open(tmp_path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(header)))
            f.write(header)
            for raw in payloads:
                f.write(raw)
        os.replace(tmp_path, path)
    finally:
        os.close(lock_fd)
        os.unlink(lock_path)


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint file")
    (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
    header_start = len(MAGIC) + 4
    try:
        header = json.loads(blob[header_start : header_start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('version')} != supported {FORMAT_VERSION}"
        )
    payload = blob[header_start + header_len :]
    tensors = {}
    for entry in header["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        raw = payload[start : start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: truncated payload for tensor {entry['name']}")
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return CheckpointData(
        config=header["config"],
        step=header["step"],
        rng_state=header["rng"],
        tensors=tensors,
        opt_scalars=header.get("opt") or {},
    )
