"""Self-describing parameter container.

Layout: the magic line ``ARGEN-CKPT\\n``, an 8-byte little-endian header
length, a UTF-8 JSON header (format version, metadata, and per-tensor
name/shape/offset), then the raw little-endian float64 payload. Writing
the same tensors and metadata always yields the same bytes.
"""
import json
import struct

import numpy as np

from .errors import DataError

MAGIC = b"ARGEN-CKPT\n"
FORMAT_VERSION = 1


def save_checkpoint(path, tensors, meta=None):
    """Write ``tensors`` (mapping name -> array, or Parameters) to ``path``."""
    if not isinstance(tensors, dict):
        tensors = {p.name: p.data for p in tensors}
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in chunks:
            fh.write(raw)


def load_checkpoint(path):
    """Return ``(tensors, meta)`` read from ``path``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    header = json.loads(blob[pos : pos + hlen].decode("utf-8"))
    pos += hlen
    if header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = pos + entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    return tensors, header["meta"]
