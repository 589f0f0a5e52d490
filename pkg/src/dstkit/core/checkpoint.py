"""Binary checkpoint container.

Layout::

    b"DSTCKPT1"
    u64 little-endian manifest length
    manifest (UTF-8 JSON): {"version", "meta", "tensors": [{name, dtype, shape, offset, nbytes}]}
    raw little-endian payloads, offsets relative to the end of the manifest

float64 payloads round-trip bit-exactly. ``export_dtype="float32"`` narrows
floating tensors for distribution copies only.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np

MAGIC = b"DSTCKPT1"
VERSION = 1
_DTYPES = {"float64": "<f8", "float32": "<f4", "int64": "<i8", "uint8": "|u1", "bool": "|b1"}


class CheckpointError(ValueError):
    pass


def save_arrays(
    path,
    arrays: Mapping[str, np.ndarray],
    meta: Optional[Mapping[str, Any]] = None,
    export_dtype: Optional[str] = None,
) -> None:
    entries = []
    payloads = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = arr.dtype.name
        if export_dtype is not None and arr.dtype.kind == "f":
            dtype = export_dtype
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=np.dtype(_DTYPES[dtype])).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payloads.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"version": VERSION, "meta": dict(meta or {}), "tensors": entries}, separators=(",", ":")
    ).encode("utf-8")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in payloads:
            fh.write(raw)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:len(MAGIC)]!r}")
    head = len(MAGIC) + 8
    if len(blob) < head:
        raise CheckpointError(f"{path}: truncated header")
    (mlen,) = struct.unpack("<Q", blob[len(MAGIC):head])
    if len(blob) < head + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(blob[head:head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"{path}: version {manifest.get('version')} != {VERSION}")
    base = head + mlen
    arrays = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        stop = start + entry["nbytes"]
        if stop > len(blob):
            raise CheckpointError(f"{path}: truncated payload for {entry['name']!r}")
        dt = np.dtype(_DTYPES[entry["dtype"]])
        arr = np.frombuffer(blob[start:stop], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    return arrays, manifest["meta"]
