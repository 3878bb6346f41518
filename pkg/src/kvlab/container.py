"""Binary container for weights, caches, and cloak keys.

Layout, byte-exact:

    bytes 0..7    magic ``KVLABBIN``
    bytes 8..15   uint64 little-endian header length H
    bytes 16..16+H-1   UTF-8 JSON header
    remainder     raw array payloads, little-endian IEEE-754 / integers,
                  concatenated in header order

Header schema::

    {
      "format_version": 1,
      "kind": "<weights|cache|cloak-key|...>",
      "meta": { ... arbitrary JSON metadata ... },
      "arrays": [{"name": str, "dtype": "<f8"|"<f4"|"<i8", "shape": [..]}, ...]
    }

Round-trips are bit-exact; the header is serialized with sorted keys so the
same payload always produces the same bytes.
"""

from __future__ import annotations

import json
from typing import Iterable

import numpy as np

from .errors import ParseError

MAGIC = b"KVLABBIN"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<f4", "<i8"}


def write_container(path, kind: str, meta: dict, arrays: Iterable[tuple]) -> None:
    """Write ``(name, ndarray)`` pairs under the given kind and metadata."""
    entries = []
    payloads = []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype} for array {name!r}")
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        payloads.append(arr.astype(dtype, copy=False).tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(len(header_bytes), dtype="<u8").tobytes())
        f.write(header_bytes)
        for chunk in payloads:
            f.write(chunk)


def read_container(path, expect_kind: str | None = None) -> tuple[dict, dict]:
    """Read a container; returns (meta, {name: ndarray})."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16:
        raise ParseError("file shorter than fixed preamble", len(blob))
    if blob[:8] != MAGIC:
        raise ParseError(f"bad magic {blob[:8]!r}", 0)
    header_len = int(np.frombuffer(blob[8:16], dtype="<u8")[0])
    if 16 + header_len > len(blob):
        raise ParseError("declared header length exceeds file size", 8)
    try:
        header = json.loads(blob[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ParseError(f"header is not valid JSON: {e}", 16) from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ParseError(f"unsupported format_version {header.get('format_version')}", 16)
    kind = header.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ParseError(f"expected kind {expect_kind!r}, found {kind!r}", 16)
    arrays = {}
    offset = 16 + header_len
    for entry in header.get("arrays", []):
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = int(dtype.itemsize * np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise ParseError(f"payload for array {entry['name']!r} truncated", offset)
        arrays[entry["name"]] = np.frombuffer(
            blob[offset : offset + nbytes], dtype=dtype
        ).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ParseError(f"{len(blob) - offset} trailing bytes after last payload", offset)
    return header["meta"], arrays
