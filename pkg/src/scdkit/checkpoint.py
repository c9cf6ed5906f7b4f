"""SCDK binary container.

Layout: magic ``SCDK``, u32 little-endian version (1), u64 manifest byte
length, UTF-8 JSON manifest (ordered list of {name, shape, dtype,
byte_offset}), then the contiguous little-endian payload. Checkpoints store
float32 tensors only; dataset containers also use u8 entries. Run metadata
rides along as a reserved ``__meta__`` u8 entry holding JSON.
"""

import json
import struct
from collections import OrderedDict

import numpy as np

from .errors import CheckpointError

MAGIC = b"SCDK"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}
_NAMES = {np.dtype("<f4"): "f32", np.dtype("u1"): "u8"}
META_KEY = "__meta__"


def save_container(path, entries, meta=None):
    """Write named arrays (insertion order preserved); dtypes f32 or u8."""
    items = []
    offset = 0
    blobs = []
    all_entries = list(entries)
    if meta is not None:
        all_entries.append((META_KEY, np.frombuffer(
            json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()))
    for name, arr in all_entries:
        arr = np.asarray(arr)
        if arr.dtype == np.uint8:
            dt = "u8"
        else:
            dt = "f32"
            arr = np.ascontiguousarray(arr, dtype="<f4")
        blob = np.ascontiguousarray(arr).tobytes()
        items.append({"name": name, "shape": list(arr.shape), "dtype": dt,
                      "byte_offset": offset})
        blobs.append(blob)
        offset += len(blob)
    manifest = json.dumps(items).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(manifest)))
        f.write(manifest)
        for blob in blobs:
            f.write(blob)


def load_container(path):
    """Read back (OrderedDict name -> array, meta dict or None)."""
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic")
        version = struct.unpack("<I", f.read(4))[0]
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        mlen = struct.unpack("<Q", f.read(8))[0]
        manifest = json.loads(f.read(mlen).decode("utf-8"))
        payload = f.read()
    out = OrderedDict()
    meta = None
    for item in manifest:
        dt = _DTYPES.get(item["dtype"])
        if dt is None:
            raise CheckpointError(f"{path}: unknown dtype {item['dtype']}")
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) * dt.itemsize if shape else dt.itemsize
        start = item["byte_offset"]
        arr = np.frombuffer(payload[start:start + n], dtype=dt).reshape(shape)
        if item["name"] == META_KEY:
            meta = json.loads(arr.tobytes().decode("utf-8"))
        else:
            out[item["name"]] = arr.copy()
    return out, meta


def save_checkpoint(path, state, meta=None):
    """State dict of float arrays -> SCDK file (f32 payload)."""
    save_container(path, [(n, np.asarray(a, dtype="<f4")) for n, a in state.items()], meta)


def load_checkpoint(path):
    state, meta = load_container(path)
    return state, meta
