"""Controllable generation with a frozen one-step generator.

Inverse problems are solved by optimizing the latent against a linear
observation operator. Editing re-decodes a teacher inversion, and latents
are mixed along great circles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nd
from .diffusion import ddim_invert
from .nd import ops
from .pairs import DownsampleOp, downsample, upsample_nearest


@dataclass
class LinearOperator:
    """y = A x for ``identity``, ``mask`` (keep ``indices``) or ``downsample`` (``op``)."""

    kind: str
    d_in: int
    indices: np.ndarray | None = None
    op: DownsampleOp | None = None
    _A: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        d = self.d_in
        if self.kind == "identity":
            A = np.eye(d)
        elif self.kind == "mask":
            if self.indices is None:
                raise ValueError("mask operator needs indices")
            idx = np.asarray(self.indices, dtype=int)
            if idx.ndim != 1 or len(np.unique(idx)) != len(idx) or np.any((idx < 0) | (idx >= d)):
                raise ValueError("mask indices must be distinct positions in [0, d_in)")
            self.indices = idx
            A = np.eye(d)[idx]
        elif self.kind == "downsample":
            if self.op is None:
                raise ValueError("downsample operator needs a DownsampleOp")
            A = downsample(self.op, np.eye(d))  # row i of I maps to column i of A
            A = A.T
        else:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        self._A = A

    @property
    def d_out(self):
        return self._A.shape[0]

    @property
    def matrix(self):
        return self._A

    def __call__(self, x):
        if isinstance(x, nd.Tensor):
            return x @ self._A.T
        return np.asarray(x, float) @ self._A.T

    def naive_fill(self, y, fill=None):
        """A right inverse applied to y: observed entries kept, the rest filled."""
        y = np.asarray(y, float)
        if self.kind == "identity":
            return y.copy()
        if self.kind == "downsample":
            return upsample_nearest(self.op, y)
        x = np.empty(y.shape[:-1] + (self.d_in,))
        x[...] = np.mean(y, axis=-1, keepdims=True) if fill is None else fill
        x[..., self.indices] = y
        return x

    def to_dict(self):
        return {"kind": self.kind, "d_in": self.d_in,
                "indices": None if self.indices is None else self.indices.tolist(),
                "op": None if self.op is None else self.op.to_dict()}

    @classmethod
    def from_dict(cls, d):
        op = DownsampleOp.from_dict(d["op"]) if d.get("op") else None
        return cls(d["kind"], int(d["d_in"]), d.get("indices"), op)


def observe(A: LinearOperator, x, noise_std=0.0, rng=None):
    """y = A x + noise with i.i.d. Gaussian noise (std 0 by default)."""
    y = A(x)
    if noise_std > 0:
        rng = rng if rng is not None else np.random.default_rng()
        y = y + noise_std * rng.standard_normal(y.shape)
    return y


@dataclass
class EditRequest:
    y: np.ndarray
    operator: LinearOperator
    c: np.ndarray | None = None
    steps: int = 500
    lr: float = 1e-2
    optimizer: str = "adam"
    init: str = "prior"  # prior | inversion | zeros, or pass z0
    z0: np.ndarray | None = None

    def __post_init__(self):
        self.y = np.atleast_2d(np.asarray(self.y, float))
        if self.y.shape[1] != self.operator.d_out:
            raise ValueError(f"observation has {self.y.shape[1]} values, operator produces {self.operator.d_out}")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.init not in ("prior", "inversion", "zeros"):
            raise ValueError(f"unknown init policy {self.init!r}")


def latent_dim(G):
    """Latent size of G; grown generators keep their base latent."""
    base = getattr(G, "base", None)
    return base.d if base is not None else G.d


def _initial_latent(G, req, rng, prior_std, teacher, grid):
    n, d = len(req.y), latent_dim(G)
    if req.z0 is not None:
        z = np.atleast_2d(np.asarray(req.z0, float))
        if z.shape != (n, d):
            raise ValueError(f"z0 has shape {z.shape}, expected {(n, d)}")
        return z.copy()
    if req.init == "zeros":
        return np.zeros((n, d))
    if req.init == "inversion":
        if teacher is None or grid is None:
            raise ValueError("inversion init needs a teacher and a time grid")
        return ddim_invert(teacher, req.operator.naive_fill(req.y), grid, req.c)
    rng = rng if rng is not None else np.random.default_rng()
    return prior_std * rng.standard_normal((n, d))


def residual_of(G, A, y, z, c=None):
    """Mean over the batch of |y - A G(z)|^2."""
    r = y - A(G.sample(z, c))
    return float(np.mean(np.sum(r * r, axis=1)))


def latent_optimize(G, req: EditRequest, rng=None, prior_std=1.0, teacher=None, grid=None):
    """Minimize |y - A G(z, c)|^2 over z with G frozen; returns the best iterate.

    The trace holds the raw residual per step and the best-so-far value,
    which is non-increasing by construction.
    """
    A = req.operator
    out_dim = G.sample(np.zeros((1, latent_dim(G))), None if req.c is None else req.c[:1]).shape[1]
    if out_dim != A.d_in:
        raise ValueError(f"operator expects {A.d_in}-dim inputs, generator produces {out_dim}")
    latent = nd.ParamSet()
    z = latent.add("z", _initial_latent(G, req, rng, prior_std, teacher, grid))
    opt = nd.OptimizerState(kind=req.optimizer, lr=req.lr)
    n = len(req.y)
    best_z, best = z.data.copy(), residual_of(G, A, req.y, z.data, req.c)
    trace = [(0, best, best)]
    for k in range(1, req.steps + 1):
        diff = A(G(z, req.c)) - req.y
        loss = ops.tsum(diff * diff) * (1.0 / n)
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"non-finite residual at step {k}")
        nd.optimizer_step(opt, latent, nd.grad(loss, {"z": z}))
        r = residual_of(G, A, req.y, z.data, req.c)
        if not np.isfinite(r):
            raise FloatingPointError(f"non-finite residual at step {k}")
        if r < best:
            best, best_z = r, z.data.copy()
        trace.append((k, r, best))
    return {"z": best_z, "x": G.sample(best_z, req.c), "residual": best, "trace": trace}


def invert_edit(G, teacher, y, grid, mode="superres", c=None, c_new=None, op: DownsampleOp | None = None):
    """Invert y with the teacher ODE and decode with G (under ``c_new`` for class transfer)."""
    y = np.atleast_2d(np.asarray(y, float))
    if mode not in ("superres", "class_transfer"):
        raise ValueError(f"unknown edit mode {mode!r}")
    if y.shape[1] != teacher.d:
        if op is None or op.out_dim(y.shape[1]) != teacher.d:
            raise ValueError(f"input has {y.shape[1]} values; teacher works at {teacher.d}")
        y = downsample(op, y)
    if latent_dim(G) != teacher.d:
        raise ValueError(f"generator latent dim {latent_dim(G)} differs from teacher dim {teacher.d}")
    z = ddim_invert(teacher, y, grid, c)
    return G.sample(z, c_new if mode == "class_transfer" and c_new is not None else c)


def slerp(a, b, t):
    """Great-circle interpolation; falls back to lerp for (anti)parallel inputs."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("slerp is undefined for a zero vector")
    t = np.asarray(t, float)
    cos = np.clip(np.dot(a.ravel(), b.ravel()) / (na * nb), -1.0, 1.0)
    omega = np.arccos(cos)
    s = np.sin(omega)
    tt = t[..., None] if t.ndim else t
    if s < 1e-12:
        return (1 - tt) * a + tt * b
    return np.sin((1 - tt) * omega) / s * a + np.sin(tt * omega) / s * b
