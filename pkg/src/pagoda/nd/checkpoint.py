"""``PGDA`` checkpoint files.

Layout: magic ``PGDA`` | u16 version | u32 manifest length | JSON manifest |
little-endian float64 payload. The manifest lists ``{name, shape, offset}``
per tensor (offset in bytes from the payload start) plus a free-form
``meta`` object. EMA shadows are stored as ``<name>.ema``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"PGDA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(tensors, meta=None):
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True).encode()
    return MAGIC + struct.pack("<HI", VERSION, len(manifest)) + manifest + b"".join(chunks)


def decode(blob):
    if len(blob) < 10:
        raise CheckpointError("truncated checkpoint header")
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic: not a PGDA checkpoint")
    version, mlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) < 10 + mlen:
        raise CheckpointError("truncated checkpoint manifest")
    manifest = json.loads(blob[10 : 10 + mlen].decode())
    payload = blob[10 + mlen :]
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        end = e["offset"] + 8 * n
        if end > len(payload):
            raise CheckpointError(f"truncated payload for tensor '{e['name']}'")
        tensors[e["name"]] = np.frombuffer(payload[e["offset"] : end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return tensors, manifest["meta"]


def save_params(path, params, meta=None):
    tensors = {}
    for name, t in params.items():
        tensors[name] = t.data
        if name in params.ema:
            tensors[f"{name}.ema"] = params.ema[name]
    atomic_write(path, encode(tensors, meta))


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())


def load_params(path, params):
    """Fill ``params`` (and EMA shadows) from a checkpoint; returns its meta."""
    tensors, meta = read(path)
    values = {k: v for k, v in tensors.items() if not k.endswith(".ema")}
    missing = [k for k in params.names() if k not in values]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
    extra = [k for k in values if k not in params]
    if extra:
        raise CheckpointError(f"checkpoint has parameters the model does not: {extra[:5]}")
    params.load_state(values)
    for k, v in tensors.items():
        if k.endswith(".ema"):
            params.ema[k[: -len(".ema")]] = v
    return meta
