"""Minimal standalone MRG1 writer.

This exporter talks to the merge toolkit only through its on-disk format,
so the byte layout is implemented here rather than imported: ASCII magic
"MRG1", little-endian u32 version 1, little-endian u64 header length, a
UTF-8 JSON header describing f32 tensors packed in lexicographic name
order with payload-relative offsets, then the raw payload.
"""

from __future__ import annotations

import json
import re
import struct

import numpy as np

MAGIC = b"MRG1"
VERSION = 1
_NAME_RE = re.compile(r"^[A-Za-z0-9_.]+$")


class Mrg1Error(ValueError):
    pass


def write_mrg1(path, tensors: dict[str, np.ndarray], metadata: dict[str, str]) -> int:
    index = {}
    offset = 0
    arrays = {}
    for name in sorted(tensors):
        if not _NAME_RE.match(name):
            raise Mrg1Error(f"invalid tensor name {name!r}")
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        if arr.ndim == 0:
            raise Mrg1Error(f"tensor {name!r} must have a shape")
        if not np.isfinite(arr).all():
            raise Mrg1Error(f"tensor {name!r} contains non-finite values")
        arrays[name] = arr
        index[name] = {
            "dtype": "f32",
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": arr.nbytes,
        }
        offset += arr.nbytes
    header = json.dumps(
        {"tensors": index, "metadata": {k: metadata[k] for k in sorted(metadata)}},
        separators=(",", ":"),
    ).encode("utf-8")
    written = 0
    with open(path, "wb") as fh:
        written += fh.write(MAGIC)
        written += fh.write(struct.pack("<I", VERSION))
        written += fh.write(struct.pack("<Q", len(header)))
        written += fh.write(header)
        for name in sorted(arrays):
            written += fh.write(arrays[name].tobytes(order="C"))
    return written
