"""Versioned binary tensor container.

Layout: 4 magic bytes, little-endian u16 version, little-endian u32
header length, UTF-8 JSON header, then raw tensor blobs concatenated in
the order declared by the header's "tensors" list. Each declaration
carries name, dtype (little-endian numpy codes) and shape, so the file
is self-describing and byte-exact across platforms.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import LayoutError

# Canonical dtype codes; note numpy reports single-byte types with "|"
# byte order, so the set is built through np.dtype to match .str output.
_ALLOWED_DTYPES = {np.dtype(c).newbyteorder("<").str
                   for c in ("f4", "f8", "i1", "i2", "i4", "i8")}


def write_container(path, magic: bytes, version: int, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write tensors with a JSON header; ``header`` must not contain "tensors"."""
    if len(magic) != 4:
        raise LayoutError("magic must be 4 bytes")
    if "tensors" in header:
        raise LayoutError("'tensors' is reserved for the declaration list")
    decls = []
    blobs = []
    for name, arr in tensors.items():
        shape = np.shape(arr)  # before ascontiguousarray, which flattens 0-d to (1,)
        arr = np.ascontiguousarray(arr).reshape(shape)
        dtype = arr.dtype.newbyteorder("<")
        code = dtype.str
        if code not in _ALLOWED_DTYPES:
            raise LayoutError(f"unsupported dtype {code} for tensor {name!r}")
        decls.append({"name": name, "dtype": code, "shape": list(arr.shape)})
        blobs.append(arr.astype(dtype, copy=False).tobytes())
    doc = dict(header)
    doc["tensors"] = decls
    payload = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<HI", version, len(payload)))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def read_container(path, magic: bytes, max_version: int) -> tuple[dict, int, dict[str, np.ndarray]]:
    """Read back (header-without-tensors, version, tensors by name)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10:
        raise LayoutError(f"{path}: truncated container")
    if data[:4] != magic:
        raise LayoutError(f"{path}: bad magic {data[:4]!r}, expected {magic!r}")
    version, header_len = struct.unpack("<HI", data[4:10])
    if version > max_version:
        raise LayoutError(f"{path}: version {version} newer than supported {max_version}")
    if len(data) < 10 + header_len:
        raise LayoutError(f"{path}: truncated header")
    try:
        doc = json.loads(data[10:10 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LayoutError(f"{path}: malformed header: {exc}") from exc
    decls = doc.pop("tensors", None)
    if not isinstance(decls, list):
        raise LayoutError(f"{path}: header missing tensor declarations")
    offset = 10 + header_len
    tensors = {}
    for decl in decls:
        try:
            name, code, shape = decl["name"], decl["dtype"], tuple(decl["shape"])
        except (KeyError, TypeError) as exc:
            raise LayoutError(f"{path}: malformed tensor declaration {decl!r}") from exc
        if code not in _ALLOWED_DTYPES:
            raise LayoutError(f"{path}: unsupported dtype {code}")
        dtype = np.dtype(code)
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(data):
            raise LayoutError(f"{path}: truncated blob for tensor {name!r}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        tensors[name] = arr.copy()
        offset += nbytes
    if offset != len(data):
        raise LayoutError(f"{path}: {len(data) - offset} trailing bytes")
    return doc, version, tensors
