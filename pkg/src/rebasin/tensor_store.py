"""Bit-exact serialization of named f32 tensors (the MRG1 container).

All tools in this package exchange weights, permutation plans and
statistics through this one format, so the writer is fully deterministic:
entries are laid out in lexicographic name order with no padding, and the
same archive always produces the same bytes.

Layout:
    bytes 0..3    ASCII magic "MRG1"
    bytes 4..7    little-endian u32 format version (= 1)
    bytes 8..15   little-endian u64 header length H
    bytes 16..16+H UTF-8 JSON: {"tensors": {name: {"dtype","shape","offset","nbytes"}},
                                "metadata": {str: str}}
    remainder     raw little-endian f32 payload; offsets are relative to
                  payload start (byte 16+H)
"""

from __future__ import annotations

import hashlib
import io
import json
import re
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"MRG1"
FORMAT_VERSION = 1
_NAME_RE = re.compile(r"^[A-Za-z0-9_.]+$")
_NONFINITE_KEY = "allow_nonfinite"


class ArchiveError(Exception):
    """Malformed archive content or bytes."""


def _check_name(name: str) -> None:
    if not isinstance(name, str) or not _NAME_RE.match(name):
        raise ArchiveError(f"invalid tensor name: {name!r}")


def _as_f32_tensor(name: str, value: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(value, dtype=np.float32)
    if arr.ndim == 0:
        raise ArchiveError(f"tensor {name!r} must have a non-empty shape")
    if any(d <= 0 for d in arr.shape):
        raise ArchiveError(f"tensor {name!r} has non-positive dim in shape {arr.shape}")
    return arr


@dataclass
class TensorArchive:
    """Named collection of dense f32 tensors plus string metadata."""

    entries: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> None:
        _check_name(name)
        if name in self.entries:
            raise ArchiveError(f"duplicate tensor name: {name!r}")
        self.entries[name] = _as_f32_tensor(name, value)

    def allows_nonfinite(self) -> bool:
        return self.metadata.get(_NONFINITE_KEY) == "true"

    def validate(self) -> None:
        for name, arr in self.entries.items():
            _check_name(name)
            _as_f32_tensor(name, arr)
            if not self.allows_nonfinite() and not np.isfinite(arr).all():
                raise ArchiveError(f"tensor {name!r} contains non-finite values")
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise ArchiveError("metadata keys and values must be strings")


def write_archive(archive: TensorArchive, sink: io.RawIOBase) -> int:
    """Serialize `archive` to `sink`; returns the number of bytes written."""
    archive.validate()
    names = sorted(archive.entries)
    index: dict[str, dict] = {}
    offset = 0
    for name in names:
        arr = archive.entries[name]
        nbytes = 4 * int(np.prod(arr.shape))
        index[name] = {
            "dtype": "f32",
            "shape": [int(d) for d in arr.shape],
            "offset": offset,
            "nbytes": nbytes,
        }
        offset += nbytes
    header_obj = {
        "tensors": index,
        "metadata": {k: archive.metadata[k] for k in sorted(archive.metadata)},
    }
    header = json.dumps(header_obj, separators=(",", ":")).encode("utf-8")

    written = 0
    written += sink.write(MAGIC)
    written += sink.write(struct.pack("<I", FORMAT_VERSION))
    written += sink.write(struct.pack("<Q", len(header)))
    written += sink.write(header)
    for name in names:
        arr = archive.entries[name]
        data = arr.astype("<f4", copy=False).tobytes(order="C")
        written += sink.write(data)
    return written


def archive_bytes(archive: TensorArchive) -> bytes:
    buf = io.BytesIO()
    write_archive(archive, buf)
    return buf.getvalue()


def save_archive(archive: TensorArchive, path) -> int:
    with open(path, "wb") as fh:
        return write_archive(archive, fh)


def _read_exact(source: io.RawIOBase, n: int, what: str) -> bytes:
    data = source.read(n)
    if data is None or len(data) != n:
        raise ArchiveError(f"truncated archive: expected {n} bytes of {what}")
    return data


def _reject_duplicate_keys(pairs):
    obj = {}
    for key, value in pairs:
        if key in obj:
            raise ArchiveError(f"duplicate name in header: {key!r}")
        obj[key] = value
    return obj


def read_archive(source, allow_nonfinite: bool = False) -> TensorArchive:
    """Parse an MRG1 byte stream back into a TensorArchive.

    Rejects non-finite payload values unless `allow_nonfinite` is passed or
    the archive's own metadata carries allow_nonfinite="true".
    """
    if isinstance(source, (bytes, bytearray)):
        source = io.BytesIO(source)
    magic = _read_exact(source, 4, "magic")
    if magic != MAGIC:
        raise ArchiveError(f"bad magic: {magic!r}")
    (version,) = struct.unpack("<I", _read_exact(source, 4, "version"))
    if version != FORMAT_VERSION:
        raise ArchiveError(f"unsupported format version: {version}")
    (header_len,) = struct.unpack("<Q", _read_exact(source, 8, "header length"))
    if header_len > (1 << 31):
        raise ArchiveError(f"implausible header length: {header_len}")
    header_raw = _read_exact(source, header_len, "header")
    try:
        header = json.loads(header_raw.decode("utf-8"), object_pairs_hook=_reject_duplicate_keys)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"header is not valid JSON: {exc}") from exc
    if not isinstance(header, dict) or set(header) != {"tensors", "metadata"}:
        raise ArchiveError("header must contain exactly 'tensors' and 'metadata'")
    tensors = header["tensors"]
    metadata = header["metadata"]
    if not isinstance(tensors, dict) or not isinstance(metadata, dict):
        raise ArchiveError("header 'tensors' and 'metadata' must be objects")
    for k, v in metadata.items():
        if not isinstance(v, str):
            raise ArchiveError(f"metadata value for {k!r} is not a string")

    payload = source.read()
    if payload is None:
        payload = b""

    archive = TensorArchive(metadata=dict(metadata))
    nonfinite_ok = allow_nonfinite or archive.allows_nonfinite()

    expected_offset = 0
    for name in sorted(tensors):
        _check_name(name)
        info = tensors[name]
        if not isinstance(info, dict):
            raise ArchiveError(f"tensor entry {name!r} is not an object")
        missing = {"dtype", "shape", "offset", "nbytes"} - set(info)
        if missing:
            raise ArchiveError(f"tensor entry {name!r} missing fields: {sorted(missing)}")
        if info["dtype"] != "f32":
            raise ArchiveError(f"tensor {name!r} has unsupported dtype {info['dtype']!r}")
        shape = info["shape"]
        if (
            not isinstance(shape, list)
            or not shape
            or not all(isinstance(d, int) and d > 0 for d in shape)
        ):
            raise ArchiveError(f"tensor {name!r} has invalid shape {shape!r}")
        nbytes = info["nbytes"]
        if nbytes != 4 * int(np.prod(shape)):
            raise ArchiveError(
                f"tensor {name!r}: nbytes {nbytes} does not match shape {shape}"
            )
        if info["offset"] != expected_offset:
            raise ArchiveError(
                f"tensor {name!r}: offset {info['offset']} breaks the packed layout "
                f"(expected {expected_offset})"
            )
        start, end = expected_offset, expected_offset + nbytes
        if end > len(payload):
            raise ArchiveError(f"truncated payload while reading tensor {name!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape).copy()
        if not nonfinite_ok and not np.isfinite(arr).all():
            raise ArchiveError(f"tensor {name!r} contains non-finite values")
        archive.entries[name] = arr
        expected_offset = end

    if expected_offset != len(payload):
        raise ArchiveError(
            f"payload length {len(payload)} disagrees with header total {expected_offset}"
        )
    return archive


def load_archive(path, allow_nonfinite: bool = False) -> TensorArchive:
    with open(path, "rb") as fh:
        return read_archive(fh, allow_nonfinite=allow_nonfinite)


def archive_digest(archive: TensorArchive) -> str:
    """sha256 hex digest of the serialized archive."""
    return hashlib.sha256(archive_bytes(archive)).hexdigest()


def tensor_digest(arr: np.ndarray) -> str:
    return hashlib.sha256(
        np.ascontiguousarray(arr, dtype="<f4").tobytes()
    ).hexdigest()
