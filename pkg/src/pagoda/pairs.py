"""Downsampling operators and (data, inversion-latent) pair sets.

Pair files (``PGPR``): magic | u16 version | u32 header length | JSON header |
fixed-width little-endian records ``(x_high f64[Dh], x_low f64[Dl], z f64[Dl],
c i32, omega f64)``. A missing condition is stored as -1, a missing omega as NaN.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .diffusion import GuidedScore, NetScore, ScoreModel, ddim_invert
from .nd.checkpoint import atomic_write

MAGIC = b"PGPR"
VERSION = 1


class PairFileError(ValueError):
    pass


@dataclass(frozen=True)
class DownsampleOp:
    """``kind`` is ``avgpool`` or ``subsample``; ``shape`` is (H, W, C) for grids."""

    kind: str = "avgpool"
    factor: int = 2
    layout: str = "vector"
    shape: tuple | None = None

    def __post_init__(self):
        if self.kind not in ("avgpool", "subsample"):
            raise ValueError(f"unknown downsample kind {self.kind!r}")
        if int(self.factor) != self.factor or self.factor < 2:
            raise ValueError(f"factor must be an integer >= 2, got {self.factor}")
        if self.layout not in ("vector", "grid"):
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.layout == "grid":
            if self.shape is None or len(self.shape) != 3:
                raise ValueError("grid layout needs shape (H, W, C)")
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    def in_dim(self, d=None):
        if self.layout == "grid":
            h, w, c = self.shape
            return h * w * c
        return d

    def out_dim(self, d):
        if self.layout == "grid":
            h, w, c = self.shape
            return (h // self.factor) * (w // self.factor) * c
        return d // self.factor

    def out_shape(self):
        if self.layout != "grid":
            return None
        h, w, c = self.shape
        return (h // self.factor, w // self.factor, c)

    def to_dict(self):
        return {"kind": self.kind, "factor": self.factor, "layout": self.layout, "shape": list(self.shape) if self.shape else None}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["factor"], d["layout"], tuple(d["shape"]) if d.get("shape") else None)


def downsample(op, x):
    """Apply ``op`` to a single datum (1-D) or a batch (n, D)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None] if single else x
    n, d = xb.shape
    f = op.factor
    if op.layout == "vector":
        if d % f:
            raise ValueError(f"dimension {d} is not divisible by factor {f}")
        blocks = xb.reshape(n, d // f, f)
        out = blocks.mean(axis=2) if op.kind == "avgpool" else blocks[:, :, 0]
    else:
        h, w, c = op.shape
        if d != h * w * c:
            raise ValueError(f"datum has {d} values, grid {op.shape} needs {h * w * c}")
        if h % f or w % f:
            raise ValueError(f"grid {h}x{w} is not divisible by factor {f}")
        g = xb.reshape(n, h // f, f, w // f, f, c)
        out = g.mean(axis=(2, 4)) if op.kind == "avgpool" else g[:, :, 0, :, 0, :]
        out = out.reshape(n, -1)
    return out[0] if single else out


def upsample_nearest(op, x):
    """Nearest-neighbour replication; right inverse of average pooling."""
    x = np.asarray(x, dtype=np.float64)
    f = op.factor
    if op.layout == "vector":
        return np.repeat(x, f, axis=-1)
    h, w, c = op.out_shape()
    g = x.reshape(-1, h, w, c)
    g = np.repeat(np.repeat(g, f, axis=1), f, axis=2)
    return g.reshape(x.shape[:-1] + (h * w * c * f * f,))


def model_digest(model):
    """Stable hash identifying a score model (weights or analytic parameters)."""
    h = hashlib.sha256()
    h.update(type(model).__name__.encode())
    h.update(json.dumps({"kind": model.process.kind, "T": model.process.T}).encode())
    if isinstance(model, NetScore):
        h.update(model.net.params.digest().encode())
    else:
        for key in sorted(vars(model)):
            val = vars(model)[key]
            if isinstance(val, ScoreModel):
                h.update(model_digest(val).encode())
            elif key != "process":
                h.update(key.encode())
                h.update(repr(_plain(val)).encode())
    return h.hexdigest()


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in sorted(v.items())}
    if hasattr(v, "__dict__"):
        return {k: _plain(x) for k, x in sorted(vars(v).items())}
    return v


@dataclass
class PairRecord:
    x_high: np.ndarray
    x_low: np.ndarray
    z: np.ndarray
    c: int | None = None
    omega: float | None = None


class PairSet:
    """Column-stored pairs with a provenance header."""

    def __init__(self, x_high, x_low, z, c=None, omega=None, header=None):
        self.x_high = np.asarray(x_high, dtype=np.float64)
        self.x_low = np.asarray(x_low, dtype=np.float64)
        self.z = np.asarray(z, dtype=np.float64)
        n = self.x_low.shape[0]
        self.c = np.full(n, -1, dtype=np.int32) if c is None else np.asarray(c, dtype=np.int32)
        self.omega = np.full(n, np.nan) if omega is None else np.broadcast_to(np.asarray(omega, dtype=np.float64), (n,)).copy()
        if self.z.shape != self.x_low.shape:
            raise ValueError(f"latent shape {self.z.shape} differs from x_low shape {self.x_low.shape}")
        if not (self.x_high.shape[0] == n == self.c.shape[0]):
            raise ValueError("pair columns have different lengths")
        self.header = dict(header or {})
        self.header.update({"n": n, "d_high": self.x_high.shape[1], "d_low": self.x_low.shape[1]})

    def __len__(self):
        return self.x_low.shape[0]

    @property
    def d_high(self):
        return self.x_high.shape[1]

    @property
    def d_low(self):
        return self.x_low.shape[1]

    @property
    def has_conditions(self):
        return bool(np.any(self.c >= 0))

    @property
    def conditions(self):
        return self.c if self.has_conditions else None

    def records(self):
        out = []
        for i in range(len(self)):
            c = int(self.c[i]) if self.c[i] >= 0 else None
            w = float(self.omega[i]) if not np.isnan(self.omega[i]) else None
            out.append(PairRecord(self.x_high[i], self.x_low[i], self.z[i], c, w))
        return out

    def subset(self, idx):
        return PairSet(self.x_high[idx], self.x_low[idx], self.z[idx], self.c[idx], self.omega[idx], self.header)

    def __eq__(self, other):
        if not isinstance(other, PairSet):
            return NotImplemented
        return encode_pairs(self) == encode_pairs(other)


def build_pairs(dataset, teacher, op, grid, rng, conditions=None, fraction=1.0, omega=None, marginal=None, seed=None):
    """Downsample ``dataset`` (n, D_high) and invert each x_low through the teacher.

    With ``omega`` set, inversion uses the guided score
    ``omega*s(x,t,c) + (1-omega)*s_marg(x,t)``; ``marginal`` defaults to the
    teacher evaluated without a condition.
    """
    dataset = np.asarray(dataset, dtype=np.float64)
    if dataset.ndim != 2:
        raise ValueError("dataset must have shape (n, D)")
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    d_high = op.in_dim(dataset.shape[1]) if op is not None else dataset.shape[1]
    d_low = op.out_dim(d_high) if op is not None else d_high
    if teacher.d != d_low:
        raise ValueError(f"teacher dimension {teacher.d} != downsampled dimension {d_low}")
    n = dataset.shape[0]
    if fraction < 1 and n:
        keep = max(1, int(round(fraction * n)))
        idx = np.sort(rng.choice(n, size=keep, replace=False))
        dataset = dataset[idx]
        conditions = None if conditions is None else np.asarray(conditions)[idx]
    x_low = downsample(op, dataset) if op is not None else dataset.copy()
    model = teacher if omega is None else GuidedScore(teacher, marginal or teacher, omega)
    z = ddim_invert(model, x_low, grid, conditions) if len(x_low) else np.zeros((0, d_low))
    header = {
        "teacher": model_digest(teacher),
        "grid": grid.to_dict(),
        "op": op.to_dict() if op is not None else None,
        "seed": seed,
        "fraction": fraction,
    }
    return PairSet(dataset.reshape(len(x_low), d_high), x_low, z, conditions, omega, header)


# -- persistence ------------------------------------------------------------------
def _record_dtype(d_high, d_low):
    return np.dtype([("x_high", "<f8", (d_high,)), ("x_low", "<f8", (d_low,)), ("z", "<f8", (d_low,)), ("c", "<i4"), ("omega", "<f8")])


def encode_pairs(ps):
    header = json.dumps(ps.header, sort_keys=True).encode()
    rec = np.zeros(len(ps), dtype=_record_dtype(ps.d_high, ps.d_low))
    rec["x_high"], rec["x_low"], rec["z"], rec["c"], rec["omega"] = ps.x_high, ps.x_low, ps.z, ps.c, ps.omega
    return MAGIC + struct.pack("<HI", VERSION, len(header)) + header + rec.tobytes()


def decode_pairs(blob):
    if len(blob) < 10:
        raise PairFileError("truncated pair file header")
    if blob[:4] != MAGIC:
        raise PairFileError("bad magic: not a PGPR pair file")
    version, hlen = struct.unpack("<HI", blob[4:10])
    if version != VERSION:
        raise PairFileError(f"unsupported pair file version {version} (expected {VERSION})")
    if len(blob) < 10 + hlen:
        raise PairFileError("truncated pair file header block")
    header = json.loads(blob[10 : 10 + hlen].decode())
    dt = _record_dtype(header["d_high"], header["d_low"])
    body = blob[10 + hlen :]
    if len(body) != header["n"] * dt.itemsize:
        raise PairFileError(f"truncated pair payload: expected {header['n']} records of {dt.itemsize} bytes, got {len(body)} bytes")
    rec = np.frombuffer(body, dtype=dt)
    return PairSet(
        rec["x_high"].reshape(-1, header["d_high"]).copy(),
        rec["x_low"].reshape(-1, header["d_low"]).copy(),
        rec["z"].reshape(-1, header["d_low"]).copy(),
        rec["c"].copy(),
        rec["omega"].copy(),
        header,
    )


def save_pairs(ps, path):
    atomic_write(path, encode_pairs(ps))


def load_pairs(path):
    with open(path, "rb") as fh:
        return decode_pairs(fh.read())
