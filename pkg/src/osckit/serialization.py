"""Single-file container for models, checkpoints, and extracted features.

Layout: one UTF-8 JSON header line (sorted keys) terminated by a newline,
followed by the raw bytes of every declared array, little-endian, row-major,
in declaration order. Round-trips are bit-exact because float payloads are
stored as their IEEE-754 bytes, never as text.

Header schema::

    {"arrays": [{"dtype": "<f8", "name": ..., "shape": [...]}, ...],
     "format": "osckit-container", "kind": ..., "meta": {...}, "version": 1}

`kind` names the payload ("backbone", "openmax", "evm", "proser", "mss",
"mls", "extracted"); `meta` holds JSON-serializable scalars and small lists.
"""

from __future__ import annotations

import json

import numpy as np

__all__ = ["save_container", "load_container", "FORMAT_NAME", "FORMAT_VERSION"]

FORMAT_NAME = "osckit-container"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = {"<f8", "<i8", "|u1"}


def save_container(path, kind, meta, arrays):
    """Write `arrays` (name -> ndarray, order preserved) under a JSON header."""
    entries = []
    blobs = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        descr = a.dtype.str
        if descr not in _ALLOWED_DTYPES:
            a = np.ascontiguousarray(a, dtype=np.float64)
            descr = a.dtype.str
        entries.append({"name": name, "dtype": descr, "shape": list(a.shape)})
        blobs.append(a.tobytes(order="C"))
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_container(path):
    """Read a container; returns (kind, meta, arrays dict in stored order)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ValueError(f"{path}: not an osckit container ({exc})") from None
        if header.get("format") != FORMAT_NAME:
            raise ValueError(f"{path}: unexpected format {header.get('format')!r}")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')!r}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after declared payload")
    return header["kind"], header["meta"], arrays
