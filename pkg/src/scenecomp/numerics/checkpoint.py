"""Named-array checkpoint files.

Layout (little-endian)::

    b"SCKP"  u32 version  u64 header_len  header_json  raw array bytes

The JSON header carries ``{"arrays": [{"name", "dtype", "shape", "offset",
"nbytes"}...], "meta": {...}}`` with offsets relative to the start of the
data section. Arrays are written in their own dtype (fp32 by default for
training runs; fp64 runs keep full precision for bit-exact resumption).
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SCKP"
VERSION = 1
_ALLOWED = {"float32", "float64", "int64", "int32", "uint8", "uint64"}


class CheckpointFormatError(ValueError):
    pass


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt.name not in _ALLOWED:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append({"name": name, "dtype": dt.name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_header(path) -> tuple[dict, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
        try:
            version, hlen = struct.unpack("<IQ", fh.read(12))
        except struct.error as exc:
            raise CheckpointFormatError(f"{path}: truncated header") from exc
        if version != VERSION:
            raise CheckpointFormatError(f"{path}: unsupported version {version}")
        try:
            header = json.loads(fh.read(hlen))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointFormatError(f"{path}: corrupt header") from exc
    return header, 16 + hlen


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    header, start = read_header(path)
    size = Path(path).stat().st_size
    out = {}
    with open(path, "rb") as fh:
        for e in header["arrays"]:
            if start + e["offset"] + e["nbytes"] > size:
                raise CheckpointFormatError(f"{path}: array {e['name']} runs past end of file")
            fh.seek(start + e["offset"])
            raw = fh.read(e["nbytes"])
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"]).newbyteorder("<"))
            out[e["name"]] = arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]), copy=True)
    return out, header.get("meta", {})
