"""Dense tensors and their on-disk format.

Tensors are plain C-contiguous numpy arrays. On disk each tensor is a JSON
manifest plus a headerless little-endian binary payload::

    {"dtype": "f32", "shape": [H, W, C], "layout": "row-major",
     "endianness": "little", "data": "teacher2d.bin"}

Besides ``f32``/``f64`` the integer tags ``u8``, ``u16``, ``i32``, ``i64`` are
accepted for label maps.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
    "u16": np.dtype("<u2"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
}


class TensorFormatError(ValueError):
    pass


def dtype_tag(arr: np.ndarray) -> str:
    dt = np.dtype(arr.dtype).newbyteorder("=")
    for tag, ref in DTYPES.items():
        if np.dtype(ref).newbyteorder("=") == dt:
            return tag
    raise TensorFormatError(f"unsupported dtype {arr.dtype}")


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Contiguous copy with positive extents and only finite entries."""
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if any(s <= 0 for s in arr.shape):
        raise ValueError(f"tensor extents must be positive, got {arr.shape}")
    if arr.dtype.kind == "f" and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def save_tensor(json_path, arr: np.ndarray, data_name: str | None = None) -> Path:
    """Write ``arr`` as ``json_path`` + binary payload next to it. Returns the manifest path."""
    json_path = Path(json_path)
    arr = np.ascontiguousarray(arr)
    tag = dtype_tag(arr)
    if data_name is None:
        data_name = json_path.with_suffix(".bin").name
    manifest = {
        "dtype": tag,
        "shape": [int(s) for s in arr.shape],
        "layout": "row-major",
        "endianness": "little",
        "data": data_name,
    }
    payload = arr.astype(DTYPES[tag], copy=False).tobytes(order="C")
    with open(json_path.parent / data_name, "wb") as fh:
        fh.write(payload)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True)
        fh.write("\n")
    return json_path


def load_tensor(json_path, expected_shape=None, name: str | None = None) -> np.ndarray:
    json_path = Path(json_path)
    label = name or json_path.stem
    if not json_path.exists():
        raise FileNotFoundError(f"missing tensor manifest for '{label}': {json_path}")
    with open(json_path, encoding="utf-8") as fh:
        m = json.load(fh)
    if m.get("layout", "row-major") != "row-major" or m.get("endianness", "little") != "little":
        raise TensorFormatError(f"tensor '{label}': only row-major little-endian is supported")
    if m["dtype"] not in DTYPES:
        raise TensorFormatError(f"tensor '{label}': unknown dtype {m['dtype']!r}")
    dt = DTYPES[m["dtype"]]
    shape = tuple(int(s) for s in m["shape"])
    if expected_shape is not None and tuple(expected_shape) != shape:
        raise TensorFormatError(f"tensor '{label}' has shape {list(shape)}, expected {list(expected_shape)}")
    data_path = json_path.parent / m["data"]
    if not data_path.exists():
        raise FileNotFoundError(f"missing payload for tensor '{label}': {data_path}")
    expected = int(np.prod(shape)) * dt.itemsize
    if os.path.getsize(data_path) != expected:
        raise TensorFormatError(f"tensor '{label}': payload size mismatch")
    arr = np.fromfile(data_path, dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=False)
