"""Flat binary checkpoint of named tensors plus a JSON manifest.

Record layout (all integers little-endian u32)::

    name_len | name (utf-8) | rank | dim_0 ... dim_{rank-1} | raw little-endian floats

The manifest ``<path>.manifest.json`` lists names, shapes and the dtype.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_DTYPES = {"float64": "<f8", "float32": "<f4"}


def save(path: str | Path, tensors: dict[str, np.ndarray], dtype: str = "float64") -> Path:
    path = Path(path)
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {dtype!r}")
    code = _DTYPES[dtype]
    manifest = {"dtype": dtype, "tensors": []}
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=code).tobytes())
            manifest["tensors"].append({"name": name, "shape": list(arr.shape)})
    Path(str(path) + ".manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".manifest.json").read_text())
    code = _DTYPES[manifest["dtype"]]
    itemsize = np.dtype(code).itemsize
    buf = path.read_bytes()
    out: dict[str, np.ndarray] = {}
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated checkpoint at byte {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(count * itemsize), dtype=code).reshape(shape)
        out[name] = arr.astype(np.float64)
    listed = [t["name"] for t in manifest["tensors"]]
    if listed != list(out):
        raise ValueError(f"{path}: manifest does not match checkpoint contents")
    return out
