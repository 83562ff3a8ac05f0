"""Binary checkpoint container shared by the generator and encoder.

Layout: 4-byte magic, little-endian uint32 format version, uint32 header
length, JSON header (model kind, hyperparameters, ordered array manifest),
then all arrays concatenated as little-endian float64.  The file length is
fully determined by the header, so truncation and corruption are detected
before any array is handed to a model.
"""

import json
from pathlib import Path

import numpy as np

MAGIC = b"FDCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is unreadable, truncated, or inconsistent."""


def write_blob(path, kind: str, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    manifest = [[name, list(arr.shape)] for name, arr in arrays]
    header = dict(meta)
    header["kind"] = kind
    header["arrays"] = manifest
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [
        MAGIC,
        int(FORMAT_VERSION).to_bytes(4, "little"),
        len(header_bytes).to_bytes(4, "little"),
        header_bytes,
    ]
    for _, arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_blob(path, kind: str) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise CheckpointError(f"{path}: file too short for a checkpoint header")
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version = int.from_bytes(data[4:8], "little")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    hlen = int.from_bytes(data[8:12], "little")
    if len(data) < 12 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupted header ({exc})") from None
    if header.get("kind") != kind:
        raise CheckpointError(
            f"{path}: expected a {kind!r} checkpoint, got {header.get('kind')!r}"
        )
    manifest = header.get("arrays")
    if not isinstance(manifest, list):
        raise CheckpointError(f"{path}: header is missing the array manifest")

    pos = 12 + hlen
    arrays = {}
    for entry in manifest:
        try:
            name, shape = entry
            shape = tuple(int(s) for s in shape)
        except (TypeError, ValueError):
            raise CheckpointError(f"{path}: malformed manifest entry {entry!r}") from None
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if len(data) < pos + nbytes:
            raise CheckpointError(
                f"{path}: truncated payload for array {name!r} "
                f"(need {nbytes} bytes at offset {pos}, have {len(data) - pos})"
            )
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos)
        arrays[name] = arr.reshape(shape).astype(float)
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after payload")
    return header, arrays
