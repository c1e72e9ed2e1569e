"""Versioned binary container: JSON header plus named raw arrays, with a content digest.

Layout: ``MAGIC`` | uint64 header length | UTF-8 JSON header | concatenated array bytes.
Written byte-for-byte deterministically (no timestamps), unlike zip-based ``.npz``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from typing import Dict, Mapping, Tuple

import numpy as np

MAGIC = b"MFUSE\x00"
VERSION = 1


class IntegrityError(IOError):
    pass


def _canonical(header: Mapping) -> bytes:
    # the digest also covers the header, so a flipped byte in the metadata is caught
    return json.dumps(header, sort_keys=True).encode()


def save(path: os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping) -> None:
    names = sorted(arrays)
    blobs, entries, offset = [], [], 0
    digest = hashlib.sha256()
    for name in names:
        a = np.ascontiguousarray(arrays[name])
        if a.dtype == object:
            raise TypeError(f"array {name!r} has object dtype")
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": len(raw)})
        digest.update(name.encode())
        digest.update(raw)
        blobs.append(raw)
        offset += len(raw)
    body = {"version": VERSION, "meta": meta, "arrays": entries}
    digest.update(_canonical(body))
    header = json.dumps({**body, "sha256": digest.hexdigest()}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load(path: os.PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise IntegrityError(f"{path}: not a container file")
    try:
        (hlen,) = struct.unpack_from("<Q", data, len(MAGIC))
        start = len(MAGIC) + 8
        header = json.loads(data[start:start + hlen].decode())
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: corrupt header ({exc})")
    if header.get("version") != VERSION:
        raise IntegrityError(f"{path}: unsupported container version {header.get('version')}")
    body = data[start + hlen:]
    digest = hashlib.sha256()
    arrays = {}
    try:
        for e in header["arrays"]:
            raw = body[e["offset"]:e["offset"] + e["nbytes"]]
            if len(raw) != e["nbytes"]:
                raise IntegrityError(f"{path}: truncated array {e['name']!r}")
            digest.update(e["name"].encode())
            digest.update(raw)
            arrays[e["name"]] = raw, e["dtype"], e["shape"]
        digest.update(_canonical({k: header[k] for k in ("version", "meta", "arrays")}))
        ok = digest.hexdigest() == header["sha256"]
    except (KeyError, TypeError, AttributeError) as exc:
        raise IntegrityError(f"{path}: malformed header ({exc!r})")
    if not ok:
        raise IntegrityError(f"{path}: checksum mismatch")
    out = {name: np.frombuffer(raw, dtype=np.dtype(dt)).reshape(shape).copy()
           for name, (raw, dt, shape) in arrays.items()}
    return out, header["meta"]
