"""Binary tensor files and checkpoint directories.

Tensor file layout (all little-endian):

    bytes 0-3   magic "MSTF"
    u32         version (currently 1)
    u32         rank
    rank * u32  dimensions
    f64 * prod  payload, row-major

A checkpoint is a directory of these files plus ``manifest.json`` mapping
parameter names to file names. Model checkpoints add a ``config.json``
sidecar so they are self-describing.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"MSTF"
VERSION = 1
MANIFEST_NAME = "manifest.json"
CONFIG_NAME = "config.json"


class TensorFormatError(ValueError):
    pass


def tensor_to_bytes(array) -> bytes:
    arr = np.asarray(array, dtype=np.float64, order="C")
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b""
    payload = arr.astype("<f8").tobytes(order="C")
    return header + dims + payload


def tensor_from_bytes(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor file version {version}")
    dims = struct.unpack_from(f"<{rank}I", blob, 12) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    offset = 12 + 4 * rank
    expected = offset + 8 * count
    if len(blob) != expected:
        raise TensorFormatError(
            f"tensor file length {len(blob)} does not match header (expected {expected})"
        )
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.astype(np.float64).reshape(dims)


def save_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())


def save_checkpoint(directory, arrays: dict, config: dict | None = None):
    """Write named arrays as tensor files plus a manifest (and optional config)."""
    os.makedirs(directory, exist_ok=True)
    mapping = {}
    for name in sorted(arrays):
        fname = name.replace("/", "_") + ".mstf"
        save_tensor(os.path.join(directory, fname), arrays[name])
        mapping[name] = fname
    manifest = {"version": VERSION, "tensors": mapping}
    with open(os.path.join(directory, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if config is not None:
        with open(os.path.join(directory, CONFIG_NAME), "w", encoding="utf-8") as fh:
            json.dump(config, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_checkpoint(directory) -> dict:
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != VERSION:
        raise TensorFormatError(f"unsupported manifest version in {path}")
    out = {}
    for name, fname in manifest["tensors"].items():
        out[name] = load_tensor(os.path.join(directory, fname))
    return out


def load_checkpoint_config(directory) -> dict | None:
    path = os.path.join(directory, CONFIG_NAME)
    if not os.path.exists(path):
        return None
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
