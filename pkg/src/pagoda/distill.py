"""Stage 2: one-step generator trained on inversion pairs plus an adversarial term.

Objective for the generator: ``L_rec + lambda * L_adv`` with
``L_rec = E|x_low - G(z)|^2`` over pairs and
``L_adv = E log sigmoid(d(x)) + E log(1 - sigmoid(d(G(z))))``; the
discriminator ascends ``L_adv``.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nd
from .diffusion import ddim_generate, prior_sample, prior_std
from .nd import ops
from .nd.checkpoint import atomic_write


class NumericFailure(FloatingPointError):
    pass


def link(u):
    """f(u) = -log(1 + e^{-u}) = log sigmoid(u)."""
    return ops.log_sigmoid(u)


def _check_link(fn, h=1e-4):
    f = lambda u: float(fn(nd.Tensor(np.array([u]))).data[0])  # noqa: E731
    d1 = (f(h) - f(-h)) / (2 * h)
    d2 = (f(h) - 2 * f(0.0) + f(-h)) / h**2
    if not (d1 > 0 and d2 < 0):
        raise ValueError(f"link needs f'(0) > 0 and f''(0) < 0, got {d1:.4g}, {d2:.4g}")
    return d1, d2


def omega_feature(omega, n):
    """Guidance weight scaled by 100, then normalized to O(1) for the input layer."""
    w = np.broadcast_to(np.asarray(omega, dtype=np.float64), (n,))
    return (100.0 * w / 1000.0)[:, None]


class _CondMLP(nd.Module):
    """MLP on ``[x * in_scale, emb(c), omega feature]``."""

    def __init__(self, d_in, d_out, hidden, activation, n_classes, emb_dim, omega_input, in_scale, rng):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in, self.d_out = d_in, d_out
        self.hidden, self.activation = tuple(hidden), activation
        self.n_classes, self.emb_dim, self.omega_input = n_classes, emb_dim, omega_input
        self.in_scale = float(in_scale)
        width = d_in + (emb_dim if n_classes else 0) + (1 if omega_input else 0)
        self.mlp = nd.MLP([width, *hidden, d_out], activation, rng)
        self.params.merge(self.mlp.params, "mlp")
        if n_classes:
            self.emb = nd.Embedding(n_classes + 1, emb_dim, rng)
            self.params.merge(self.emb.params, "emb")

    def config(self):
        return {
            "hidden": list(self.hidden),
            "activation": self.activation,
            "n_classes": self.n_classes,
            "emb_dim": self.emb_dim,
            "omega_input": self.omega_input,
            "in_scale": self.in_scale,
        }

    def _inputs(self, x, c, omega):
        x = x if isinstance(x, nd.Tensor) else nd.Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"expected input of shape (n, {self.d_in}), got {x.shape}")
        parts = [x * self.in_scale]
        n = x.shape[0]
        if self.n_classes:
            ids = np.full(n, self.n_classes) if c is None else np.broadcast_to(np.asarray(c), (n,))
            parts.append(self.emb(ids))
        if self.omega_input:
            parts.append(nd.Tensor(omega_feature(1.0 if omega is None else omega, n)))
        return parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)

    @property
    def last_weight(self):
        return f"mlp.l{len(self.mlp.layers) - 1}.w"


class Generator(_CondMLP):
    """One-step map latent -> data (NFE = 1)."""

    def __init__(self, d, hidden=(64, 64), activation="silu", n_classes=0, emb_dim=8, omega_input=False, in_scale=1.0, rng=None):
        super().__init__(d, d, hidden, activation, n_classes, emb_dim, omega_input, in_scale, rng)
        self.d = d

    def forward(self, z, c=None, omega=None):
        return self.mlp(self._inputs(z, c, omega))

    def sample(self, z, c=None, omega=None):
        return self(z, c, omega).data

    def config(self):
        return {"d": self.d, **super().config()}


class Discriminator(_CondMLP):
    """Logit network d(x[, c, omega]); the link f is log-sigmoid."""

    def __init__(self, d, hidden=(64, 64), activation="silu", n_classes=0, emb_dim=8, omega_input=False, in_scale=1.0, rng=None):
        super().__init__(d, 1, hidden, activation, n_classes, emb_dim, omega_input, in_scale, rng)
        self.d = d
        self.link_derivs = _check_link(link)

    def forward(self, x, c=None, omega=None):
        return ops.reshape(self.mlp(self._inputs(x, c, omega)), (-1,))

    def config(self):
        return {"d": self.d, **super().config()}


class AffineGenerator(nd.Module):
    """G(z) = a * z + b elementwise; closed-form instances and oracle tests."""

    last_weight = "a"

    def __init__(self, a=1.0, b=0.0, d=1):
        super().__init__()
        self.d = d
        self.a = self.params.add("a", np.broadcast_to(np.asarray(a, dtype=np.float64), (d,)).copy())
        self.b = self.params.add("b", np.broadcast_to(np.asarray(b, dtype=np.float64), (d,)).copy())

    def forward(self, z, c=None, omega=None):
        return z * self.a + self.b

    def sample(self, z, c=None, omega=None):
        return self(z).data


class LinearDiscriminator(nd.Module):
    """d(x) = x . w + b."""

    def __init__(self, w=1.0, b=0.0, d=1):
        super().__init__()
        self.d = d
        self.w = self.params.add("w", np.broadcast_to(np.asarray(w, dtype=np.float64), (d,)).copy())
        self.b = self.params.add("b", np.asarray(float(b)))

    def forward(self, x, c=None, omega=None):
        return x @ self.w + self.b


# -- losses --------------------------------------------------------------------
def _nonempty(*arrays):
    for a in arrays:
        if a is None or len(a) == 0:
            raise ValueError("batch must be nonempty")


def recon_loss(G, z, x, c=None, omega=None):
    """Mean over the batch of |x - G(z)|^2 (a Tensor)."""
    _nonempty(z)
    x = np.asarray(x, dtype=np.float64)
    out = G(z, c, omega)
    if out.shape != x.shape:
        raise ValueError(f"generator output {out.shape} does not match targets {x.shape}")
    diff = out - x
    return ops.mean(ops.tsum(diff * diff, axis=1))


def adv_terms(D, real, fake, c_real=None, c_fake=None, w_real=None, w_fake=None, weights_real=None, weights_fake=None):
    """(E f(d(real)), E f(-d(fake))) with optional per-sample weights summing to one."""
    lr = link(D(real, c_real, w_real))
    lf = link(-D(fake, c_fake, w_fake))
    er = ops.mean(lr) if weights_real is None else ops.tsum(lr * weights_real)
    ef = ops.mean(lf) if weights_fake is None else ops.tsum(lf * weights_fake)
    return er, ef


def adv_loss(G, D, real, z, c_real=None, c_fake=None, omega=None):
    _nonempty(real, z)
    er, ef = adv_terms(D, real, G(z, c_fake, omega), c_real, c_fake, omega, omega)
    return er + ef


def adaptive_lambda(grad_rec_sq, grad_adv_sq, coeff=0.2, lo=1e-4, hi=10.0):
    if grad_rec_sq < 0 or grad_adv_sq < 0:
        raise ValueError("squared gradient norms must be nonnegative")
    if grad_adv_sq < 1e-12:
        return hi
    return float(min(max(coeff * grad_rec_sq / grad_adv_sq, lo), hi))


def noise_to_data_distill_loss(G, teacher, z, grid, c=None):
    """Mean |ddim_generate(teacher, z) - G(z)|^2 (baseline objective)."""
    _nonempty(z)
    target = ddim_generate(teacher, np.asarray(z, dtype=np.float64), grid, c)
    return float(recon_loss(G, z, target, c).data)


# -- training ---------------------------------------------------------------------
@dataclass
class Stage2Config:
    steps: int = 2000
    batch: int = 256
    lr_g: float = 1e-3
    lr_d: float = 1e-3
    optimizer: str = "adam"
    lambda_mode: str = "adaptive"  # adaptive | fixed
    lambda_fixed: float = 1.0
    lambda_coeff: float = 0.2
    lambda_min: float = 1e-4
    lambda_max: float = 10.0
    adv_scale: float = 1.0
    g_adv: str = "minimax"  # minimax | nonsaturating
    update_order: str = "D_first"  # D_first | G_first
    ema_decay: float = 0.999
    pair_fraction: float = 1.0
    log_every: int = 50
    eval_every: int = 0
    log_wallclock: bool = False
    lr_decay: bool = False  # linear decay of both learning rates to zero

    def __post_init__(self):
        if self.lambda_coeff <= 0:
            raise ValueError("adaptive-lambda coefficient must be positive")
        if not 0 < self.lambda_min <= self.lambda_max:
            raise ValueError("need 0 < lambda_min <= lambda_max")
        if self.update_order not in ("D_first", "G_first"):
            raise ValueError(f"update_order must be D_first or G_first, got {self.update_order!r}")
        if self.lambda_mode not in ("adaptive", "fixed"):
            raise ValueError(f"lambda_mode must be adaptive or fixed, got {self.lambda_mode!r}")
        if self.g_adv not in ("minimax", "nonsaturating"):
            raise ValueError(f"g_adv must be minimax or nonsaturating, got {self.g_adv!r}")


@dataclass
class Batch:
    """One step's inputs. Empty ``z_pair`` means no reconstruction term."""

    z_pair: np.ndarray
    x_pair: np.ndarray
    real: np.ndarray
    z_prior: np.ndarray
    c_pair: np.ndarray | None = None
    c_real: np.ndarray | None = None
    c_prior: np.ndarray | None = None
    omega_pair: np.ndarray | None = None
    omega_real: np.ndarray | None = None
    omega_prior: np.ndarray | None = None


class Stage2State:
    def __init__(self, G, D, config):
        self.G, self.D, self.config = G, D, config
        self.opt_g = nd.OptimizerState(kind=config.optimizer, lr=config.lr_g)
        self.opt_d = nd.OptimizerState(kind=config.optimizer, lr=config.lr_d)
        self.step = 0


def _finite(value, name):
    if not math.isfinite(value):
        raise NumericFailure(f"non-finite {name}")
    return value


def _sq(grads, names):
    return float(sum(np.sum(grads[k] ** 2) for k in names))


def _d_update(state, batch):
    G, D = state.G, state.D
    fake = G(batch.z_prior, batch.c_prior, batch.omega_prior).data
    er, ef = adv_terms(D, batch.real, fake, batch.c_real, batch.c_prior, batch.omega_real, batch.omega_prior)
    L = er + ef
    _finite(float(L.data), "discriminator loss L_adv")
    g = nd.grad(-L, D.params.trainable())
    nd.optimizer_step(state.opt_d, D.params, g)
    return float(L.data)


def _g_update(state, batch):
    G, D, cfg = state.G, state.D, state.config
    params = G.params.trainable()
    last = [G.last_weight] if G.last_weight in params else []
    has_pairs = batch.z_pair is not None and len(batch.z_pair) > 0
    if has_pairs:
        L_rec = recon_loss(G, batch.z_pair, batch.x_pair, batch.c_pair, batch.omega_pair)
        rec = _finite(float(L_rec.data), "reconstruction loss L_rec")
        g_rec = nd.grad(L_rec, params)
    else:
        rec, g_rec = 0.0, {k: np.zeros_like(t.data) for k, t in params.items()}
    fake = G(batch.z_prior, batch.c_prior, batch.omega_prior)
    logits = D(fake, batch.c_prior, batch.omega_prior)
    if cfg.g_adv == "minimax":
        L_adv_g = ops.mean(link(-logits))
    else:
        L_adv_g = -ops.mean(link(logits))
    L_adv_g = L_adv_g * cfg.adv_scale
    _finite(float(L_adv_g.data), "generator adversarial loss")
    g_adv = nd.grad(L_adv_g, params)
    grad_rec_sq, grad_adv_sq = _sq(g_rec, last), _sq(g_adv, last)
    if cfg.lambda_mode == "adaptive":
        lam = adaptive_lambda(grad_rec_sq, grad_adv_sq, cfg.lambda_coeff, cfg.lambda_min, cfg.lambda_max)
    else:
        lam = cfg.lambda_fixed
    grads = {k: g_rec[k] + lam * g_adv[k] for k in params}
    for k, v in grads.items():
        if not np.all(np.isfinite(v)):
            raise NumericFailure(f"non-finite generator gradient for '{k}'")
    nd.optimizer_step(state.opt_g, G.params, grads)
    return rec, lam, grad_rec_sq, grad_adv_sq


def stage2_step(state, batch):
    """One alternating update; returns the metrics record."""
    if state.config.update_order == "D_first":
        loss_adv = _d_update(state, batch)
        rec, lam, grs, gas = _g_update(state, batch)
    else:
        rec, lam, grs, gas = _g_update(state, batch)
        loss_adv = _d_update(state, batch)
    state.step += 1
    return {"step": state.step, "loss_rec": rec, "loss_adv": loss_adv, "lambda": lam, "grad_rec_sq": grs, "grad_adv_sq": gas}


CSV_COLUMNS = ["step", "loss_rec", "loss_adv", "lambda", "grad_rec_sq", "grad_adv_sq", "w1_eval", "wallclock_ms"]


class MetricsLog:
    """Append-only CSV rows; the header is written once."""

    def __init__(self, columns=CSV_COLUMNS):
        self.columns = list(columns)
        self.rows = []

    def append(self, row):
        if self.rows and "step" in row and row["step"] <= self.rows[-1].get("step", -1) and row.get("stage") == self.rows[-1].get("stage"):
            raise ValueError("metrics rows must be monotone in step")
        self.rows.append(dict(row))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in self.columns})
        return buf.getvalue()

    def write(self, path):
        atomic_write(path, self.to_csv().encode())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def train_stage2(teacher, pairs, data, config, rng, G=None, D=None, eval_fn=None, hidden=(64, 64)):
    """Train a one-step generator on ``pairs`` with real samples from ``data``.

    ``data`` is a callable ``(n, rng) -> array`` or an array to resample from.
    Returns ``(G, D, MetricsLog)``; G carries an EMA shadow when ``ema_decay > 0``.
    """
    d = pairs.d_low
    scale = 1.0 / prior_std(teacher.process)
    G = G if G is not None else Generator(d, hidden, in_scale=scale, rng=rng)
    D = D if D is not None else Discriminator(d, hidden, rng=rng)
    state = Stage2State(G, D, config)
    if config.pair_fraction < 1.0:
        keep = max(1, int(round(config.pair_fraction * len(pairs))))
        pairs = pairs.subset(np.sort(rng.choice(len(pairs), keep, replace=False)))
    if callable(data):
        draw = data
    else:
        arr = np.asarray(data, dtype=np.float64)
        draw = lambda n, r: arr[r.integers(len(arr), size=n)]  # noqa: E731
    log = MetricsLog()
    t0 = time.perf_counter()
    for step in range(config.steps):
        idx = rng.integers(len(pairs), size=config.batch) if len(pairs) else np.zeros(0, dtype=int)
        batch = Batch(
            z_pair=pairs.z[idx],
            x_pair=pairs.x_low[idx],
            real=draw(config.batch, rng),
            z_prior=prior_sample(teacher.process, d, config.batch, rng),
        )
        if config.lr_decay:
            frac = 1.0 - step / config.steps
            state.opt_g.lr, state.opt_d.lr = config.lr_g * frac, config.lr_d * frac
        rec = stage2_step(state, batch)
        if config.ema_decay > 0:
            nd.ema_update(G.params, config.ema_decay)
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            if config.eval_every and eval_fn is not None and (step + 1) % config.eval_every == 0:
                rec["w1_eval"] = eval_fn(G)
            if config.log_wallclock:
                rec["wallclock_ms"] = round(1000 * (time.perf_counter() - t0), 3)
            log.append(rec)
    return G, D, log


def ema_generator(G):
    """Copy of ``G`` whose weights are the EMA shadows (raw weights when no shadow)."""
    cls = type(G)
    cfg = G.config()
    H = cls(**cfg)
    H.params.load_state({k: G.params.ema.get(k, t.data) for k, t in G.params.items()})
    return H


def save_generator(path, G, meta=None):
    nd.save_params(path, G.params, meta={"kind": "generator", "config": G.config(), **(meta or {})})


def load_generator(path):
    _, meta = nd.checkpoint.read(path)
    if meta.get("kind") != "generator":
        raise nd.CheckpointError(f"{path} is not a Stage-2 generator checkpoint")
    G = Generator(**meta["config"])
    nd.load_params(path, G.params)
    return G, meta


def config_dict(config):
    return asdict(config)
