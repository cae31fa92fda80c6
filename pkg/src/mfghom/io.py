"""Self-describing binary containers for tables and space-time fields.

Layout: an eight-byte magic string, an eight-byte little-endian header length,
a UTF-8 JSON header, then the raw little-endian float64 array payloads in the
order listed under ``header["arrays"]`` (C order).  The same container backs
the ``.mfgtab`` effective-table files and the ``.mfgsol`` field dumps.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MFGHOM1\n"
TOOL_VERSION = "mfghom-0.1.0"


def write_container(path, header: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> float ndarray) after the JSON ``header``.

    The header is canonicalized (sorted keys) so identical inputs produce
    byte-identical files.
    """
    path = Path(path)
    manifest = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": "<f8"})
        payloads.append(arr.tobytes(order="C"))
    full = dict(header)
    full["arrays"] = manifest
    full["tool_version"] = TOOL_VERSION
    blob = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for chunk in payloads:
            fh.write(chunk)


def read_container(path):
    """Read a container; returns ``(header, arrays)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not a mfghom container")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8", count=count)
            arrays[spec["name"]] = data.reshape(shape).copy()
    return header, arrays
