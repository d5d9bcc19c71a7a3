"""Stage 3: progressive growing of a distilled one-step generator.

Features live on a lattice of spatial positions, shape ``(n, P, C)``. The
Stage-2 output layer is re-expressed as a per-position feature projection
plus a 1x1 output map that initially selects the original outputs, so the
base-resolution output is unchanged. Each growth stage is a learnable
transposed replication (initialized to nearest-neighbour copying) followed by
two residual blocks whose second convolution starts at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nd
from .distill import Discriminator, Generator, MetricsLog, NumericFailure, adv_terms, link
from .nd import ops
from .pairs import DownsampleOp, downsample

SUPPORTED_FACTORS = (2, 4, 8)


@dataclass(frozen=True)
class Lattice:
    """Spatial layout: ``dims`` is (P,) for signals or (H, W) for images."""

    dims: tuple
    out_channels: int = 1

    @property
    def positions(self):
        return int(np.prod(self.dims))

    @property
    def size(self):
        return self.positions * self.out_channels

    def up(self):
        return Lattice(tuple(2 * d for d in self.dims), self.out_channels)

    def downsample_op(self, factor):
        """Operator mapping this lattice's flattened data to a ``factor``-coarser one."""
        if len(self.dims) == 1:
            return DownsampleOp("avgpool", factor)
        h, w = self.dims
        return DownsampleOp("avgpool", factor, "grid", (h, w, self.out_channels))

    def neighbors(self):
        """(P, K) clamped 3-neighbourhood (1-D) or 3x3 neighbourhood (2-D)."""
        if len(self.dims) == 1:
            p = np.arange(self.dims[0])
            return np.stack([np.clip(p + o, 0, self.dims[0] - 1) for o in (-1, 0, 1)], axis=1)
        h, w = self.dims
        yy, xx = np.divmod(np.arange(h * w), w)
        cols = []
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                cols.append(np.clip(yy + dy, 0, h - 1) * w + np.clip(xx + dx, 0, w - 1))
        return np.stack(cols, axis=1)

    def upsample_index(self):
        """Index into the (P * K) sub-position table of a 2x transposed replication."""
        if len(self.dims) == 1:
            return np.arange(self.positions * 2)
        h, w = self.dims
        q = np.arange(4 * h * w)
        y, x = np.divmod(q, 2 * w)
        parent = (y // 2) * w + x // 2
        sub = (y % 2) * 2 + x % 2
        return parent * 4 + sub

    def to_dict(self):
        return {"dims": list(self.dims), "out_channels": self.out_channels}


def _conv(F, idx, w, b):
    """Neighbourhood convolution on (n, P, C) features."""
    n, P, C = F.shape
    g = ops.take(F, idx, axis=1)  # (n, P, K, C)
    g = ops.reshape(g, (n, P, idx.shape[1] * C))
    return g @ w + b


class GrowableGenerator(nd.Module):
    """Frozen Stage-2 trunk + trainable head + stack of 2x growth stages."""

    def __init__(self, base: Generator, lattice: Lattice, channels=8, rng=None, near_identity=True):
        super().__init__()
        if base.d != lattice.size:
            raise ValueError(f"generator output {base.d} does not match lattice size {lattice.size}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.base, self.base_lattice, self.channels = base, lattice, channels
        self.near_identity = near_identity
        self.stages = []  # list of dicts name -> Tensor
        n_layers = len(base.mlp.layers)
        self.trunk_names = []
        for k, t in base.params.items():
            if k.startswith(f"mlp.l{n_layers - 1}."):
                continue
            name = f"trunk.{k}"
            self.params.add(name, t, trainable=False)
            self.trunk_names.append(name)
        head = base.mlp.last
        H, P, oc, C = head.fan_in, lattice.positions, lattice.out_channels, channels
        if C < oc:
            raise ValueError(f"feature width {C} must be >= output channels {oc}")
        w = rng.normal(0.0, 1.0 / math.sqrt(H), size=(H, P, C))
        b = np.zeros((P, C))
        w[:, :, :oc] = head.w.data.reshape(H, P, oc)
        b[:, :oc] = head.b.data.reshape(P, oc)
        self.params.add("head.proj.w", w.reshape(H, P * C))
        self.params.add("head.proj.b", b.reshape(P * C))
        out_w = np.zeros((C, oc))
        out_w[:oc, :oc] = np.eye(oc)
        self.params.add("head.out.w", out_w)
        self.params.add("head.out.b", np.zeros(oc))
        self._rng = rng

    # -- structure ----------------------------------------------------------------
    @property
    def n_stages(self):
        return len(self.stages)

    @property
    def lattice(self):
        lat = self.base_lattice
        for _ in self.stages:
            lat = lat.up()
        return lat

    @property
    def d(self):
        return self.lattice.size

    def trunk_digest(self):
        return self.params.digest(self.trunk_names)

    def _add_stage(self):
        i, C, rng = self.n_stages, self.channels, self._rng
        lat_in = self.lattice
        K_up = 2 ** len(lat_in.dims)
        K_conv = 3 ** len(lat_in.dims)
        names = {}
        up = np.tile(np.eye(C), (1, K_up)) if self.near_identity else rng.normal(0, 1 / math.sqrt(C), (C, C * K_up))
        names["up.w"] = self.params.add(f"stage{i}.up.w", up)
        for j in range(2):
            names[f"res{j}.c1.w"] = self.params.add(f"stage{i}.res{j}.c1.w", rng.normal(0, 1 / math.sqrt(K_conv * C), (K_conv * C, C)))
            names[f"res{j}.c1.b"] = self.params.add(f"stage{i}.res{j}.c1.b", np.zeros(C))
            w2 = np.zeros((K_conv * C, C)) if self.near_identity else rng.normal(0, 1 / math.sqrt(K_conv * C), (K_conv * C, C))
            names[f"res{j}.c2.w"] = self.params.add(f"stage{i}.res{j}.c2.w", w2)
            names[f"res{j}.c2.b"] = self.params.add(f"stage{i}.res{j}.c2.b", np.zeros(C))
        self.stages.append({"names": names, "lat_in": lat_in})

    def stage_param_names(self, i):
        return [k for k in self.params.names() if k.startswith(f"stage{i}.")]

    # -- forward ----------------------------------------------------------------------
    def features(self, z, c=None, omega=None):
        base = self.base
        h = base.mlp.features(base._inputs(z, c, omega))
        n = h.shape[0]
        F = ops.reshape(h @ self.params["head.proj.w"] + self.params["head.proj.b"], (n, self.base_lattice.positions, self.channels))
        for st in self.stages:
            F = self._stage_forward(st, F)
        return F

    def _stage_forward(self, st, F):
        lat_in, p = st["lat_in"], st["names"]
        n, P, C = F.shape
        K = 2 ** len(lat_in.dims)
        U = ops.reshape(F @ p["up.w"], (n, P * K, C))
        F = ops.take(U, lat_in.upsample_index(), axis=1)
        nb = lat_in.up().neighbors()
        for j in range(2):
            r = ops.silu(_conv(F, nb, p[f"res{j}.c1.w"], p[f"res{j}.c1.b"]))
            F = F + _conv(r, nb, p[f"res{j}.c2.w"], p[f"res{j}.c2.b"])
        return F

    def forward(self, z, c=None, omega=None):
        F = self.features(z, c, omega)
        out = F @ self.params["head.out.w"] + self.params["head.out.b"]
        return ops.reshape(out, (F.shape[0], self.d))

    def sample(self, z, c=None, omega=None):
        return self(z, c, omega).data

    # -- cost model -----------------------------------------------------------------
    def flops(self, monolithic=False):
        """Multiply-add FLOPs for one sample.

        ``monolithic=True`` prices a same-width generator that projects straight
        to the final resolution and runs every residual block there.
        """
        C = self.channels
        H = self.base.mlp.last.fan_in
        trunk = sum(layer.flops(1) for layer in self.base.mlp.layers[:-1])
        final = self.lattice
        kc = 3 ** len(final.dims)
        block_cost = lambda P: 2 * (2 * P * kc * C * C)  # noqa: E731  two convs per block
        out = 2 * final.positions * C * final.out_channels
        if monolithic:
            proj = 2 * H * final.positions * C
            return trunk + proj + 2 * self.n_stages * block_cost(final.positions) + out
        total = trunk + 2 * H * self.base_lattice.positions * C + out
        for st in self.stages:
            P_in = st["lat_in"].positions
            K = 2 ** len(st["lat_in"].dims)
            total += 2 * P_in * C * C * K + 2 * block_cost(P_in * K)
        return total


def grow(G, factor=2, rng=None):
    """Append log2(factor) growth stages and set trainability.

    On a plain Stage-2 generator the first call wraps it (the trunk is frozen).
    The previously highest-resolution block (the head projection on first
    growth, else the last stage) is unfrozen; new stages are trainable; all
    other non-output parameters are frozen.
    """
    if factor not in SUPPORTED_FACTORS:
        raise ValueError(f"unsupported growth factor {factor}; choose from {SUPPORTED_FACTORS}")
    if isinstance(G, Generator):
        raise TypeError("wrap the Stage-2 generator first: GrowableGenerator(G, lattice)")
    if rng is not None:
        G._rng = rng
    prev = ["head.proj.w", "head.proj.b"] if G.n_stages == 0 else G.stage_param_names(G.n_stages - 1)
    G.params.freeze_all()
    G.params.set_trainable(prev, True)
    G.params.set_trainable(["head.out.w", "head.out.b"], True)
    for _ in range(int(round(math.log2(factor)))):
        G._add_stage()
    return G


# -- losses -------------------------------------------------------------------------
def stage3_recon_loss(G, z, x_high, c=None):
    if len(z) == 0:
        raise ValueError("batch must be nonempty")
    x_high = np.asarray(x_high, dtype=np.float64)
    if x_high.shape[1] != G.d:
        raise ValueError(f"x_high has {x_high.shape[1]} values, generator emits {G.d}")
    diff = G(z, c) - x_high
    return ops.mean(ops.tsum(diff * diff, axis=1))


def stage3_adv_loss(G, D, real, z, c=None):
    if len(real) == 0 or len(z) == 0:
        raise ValueError("batch must be nonempty")
    if D.d != G.d:
        raise ValueError(f"discriminator input {D.d} != generator output {G.d}")
    er, ef = adv_terms(D, real, G(z, c))
    return er + ef


@dataclass
class Stage3Config:
    steps: int = 2000
    batch: int = 128
    lam: float = 1.0
    rec_weight: float = 1.0  # 0 ablates L_rec (adversarial-only Stage 3)
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    lr_decay: bool = False
    reuse_discriminator: bool = False
    d_hidden: tuple = (64, 64)
    log_every: int = 50
    consistency_every: int = 0  # 0 disables the consistency probe

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("stage-3 adversarial weight must be >= 0")
        if self.rec_weight < 0:
            raise ValueError("stage-3 reconstruction weight must be >= 0")


def consistency(G_grown, G_base, z, factor):
    """Correlation between downsample(G'(z)) and G(z) plus the max abs gap."""
    from .metrics import correlation

    op = G_grown.lattice.downsample_op(factor)
    low = downsample(op, G_grown.sample(z))
    ref = G_base.sample(z)
    return correlation(low, ref), float(np.max(np.abs(low - ref)))


def train_stage3(G, pairs, data_high, config, rng, prior_fn, D=None, base=None):
    """Train the unfrozen parameters of a grown generator.

    ``prior_fn(n, rng)`` draws latents; ``data_high`` is an array or sampler of
    full-resolution data. ``base`` (the Stage-2 generator) enables the
    consistency probe. Returns ``(G, D, MetricsLog)``.
    """
    if G.n_stages == 0:
        raise ValueError("grow the generator before Stage-3 training")
    if pairs.d_high != G.d:
        raise ValueError(f"pairs carry x_high of size {pairs.d_high}, generator emits {G.d}")
    D = D if D is not None and config.reuse_discriminator else Discriminator(G.d, config.d_hidden, rng=rng)
    draw = data_high if callable(data_high) else (lambda n, r, a=np.asarray(data_high): a[r.integers(len(a), size=n)])
    trunk_before = G.trunk_digest()
    opt_g = nd.OptimizerState(kind="adam", lr=config.lr_g)
    opt_d = nd.OptimizerState(kind="adam", lr=config.lr_d)
    factor = 2**G.n_stages
    log = MetricsLog(["step", "loss_rec", "loss_adv", "lambda", "consistency"])
    z_probe = prior_fn(100, np.random.default_rng(12345)) if base is not None else None
    for step in range(config.steps):
        if config.lr_decay:
            frac = 1.0 - step / config.steps
            opt_g.lr, opt_d.lr = config.lr_g * frac, config.lr_d * frac
        idx = rng.integers(len(pairs), size=config.batch)
        real = draw(config.batch, rng)
        zp = prior_fn(config.batch, rng)
        c_pair = pairs.c[idx] if pairs.has_conditions else None
        # discriminator ascent against the current generator
        L_adv = stage3_adv_loss(G, D, real, zp)
        if not np.isfinite(L_adv.data):
            raise NumericFailure(f"non-finite stage-3 adversarial loss at step {step}")
        if config.lam > 0:
            nd.optimizer_step(opt_d, D.params, nd.grad(-L_adv, D.params.trainable()))
        # generator descent on L_rec + lam * L_adv
        L_rec = stage3_recon_loss(G, pairs.z[idx], pairs.x_high[idx], c_pair)
        L = L_rec * config.rec_weight
        if config.lam > 0:
            L = L + config.lam * ops.mean(link(-D(G(zp))))
        if not np.isfinite(L.data):
            raise NumericFailure(f"non-finite stage-3 generator loss at step {step}")
        nd.optimizer_step(opt_g, G.params, nd.grad(L, G.params.trainable()))
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            row = {"step": step + 1, "loss_rec": float(L_rec.data), "loss_adv": float(L_adv.data), "lambda": config.lam}
            if base is not None and config.consistency_every and ((step + 1) % config.consistency_every == 0 or step + 1 == config.steps):
                row["consistency"] = consistency(G, base, z_probe, factor)[0]
            log.append(row)
    if G.trunk_digest() != trunk_before:
        raise AssertionError("frozen trunk changed during Stage-3 training")
    return G, D, log


# -- persistence --------------------------------------------------------------------
def save_grown(path, G, meta=None):
    manifest = {
        "kind": "grown",
        "base": G.base.config(),
        "lattice": G.base_lattice.to_dict(),
        "channels": G.channels,
        "stages": [{"index": i, "factor": 2, "lattice_in": st["lat_in"].to_dict()} for i, st in enumerate(G.stages)],
        "trainable": [k for k in G.params.names() if G.params.is_trainable(k)],
    }
    manifest.update(meta or {})
    nd.save_params(path, G.params, meta=manifest)


def load_grown(path, into=None):
    """Load a grown checkpoint; ``into`` must have at least as many stages."""
    tensors, meta = nd.checkpoint.read(path)
    if meta.get("kind") != "grown":
        raise nd.CheckpointError(f"{path} is not a grown-generator checkpoint")
    n = len(meta["stages"])
    if into is None:
        base = Generator(**meta["base"])
        lat = meta["lattice"]
        into = GrowableGenerator(base, Lattice(tuple(lat["dims"]), lat["out_channels"]), meta["channels"])
        for _ in range(n):
            into._add_stage()
    elif into.n_stages < n:
        raise nd.CheckpointError(f"checkpoint has {n} growth stages but the target architecture has only {into.n_stages}")
    elif into.n_stages > n:
        raise nd.CheckpointError(f"checkpoint has {n} growth stages, target has {into.n_stages}")
    values = {k: v for k, v in tensors.items() if not k.endswith(".ema")}
    if set(values) != set(into.params.names()):
        diff = sorted(set(values) ^ set(into.params.names()))
        raise nd.CheckpointError(f"parameter names differ between checkpoint and architecture: {diff[:5]}")
    into.params.load_state(values)
    trainable = set(meta["trainable"])
    for k in into.params.names():
        into.params.set_trainable([k], k in trainable)
    return into, meta
