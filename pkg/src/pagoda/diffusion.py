"""Forward processes, score models, DSM training and PF-ODE solving.

Two forward processes are supported:

* ``VE``: ``x_t = x_0 + t * xi``; PF-ODE ``dx/dt = -t * s(x, t)``.
* ``VP``: the OU process ``dx = -x dt + sqrt(2) dw``;
  ``x_t = e^{-t} x_0 + sqrt(1 - e^{-2t}) xi``; PF-ODE ``dx/dt = -x - s(x, t)``.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import nd
from .nd import ops

T_MIN = 0.002
RHO = 7.0


class SolverError(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True)
class ForwardProcess:
    kind: str = "VE"
    T: float = 80.0

    def __post_init__(self):
        if self.kind not in ("VE", "VP"):
            raise ValueError(f"process kind must be VE or VP, got {self.kind!r}")
        if not self.T > 0:
            raise ValueError(f"horizon T must be positive, got {self.T}")


def marginal_params(process, t):
    """(scale, std) of the perturbation kernel x_t | x_0 at time t."""
    t = float(t)
    if t < 0 or t > process.T * (1 + 1e-12):
        raise ValueError(f"time {t} outside [0, {process.T}]")
    if process.kind == "VE":
        return 1.0, t
    return math.exp(-t), math.sqrt(-math.expm1(-2.0 * t))


def _marginal_arrays(process, t):
    t = np.asarray(t, dtype=np.float64)
    if process.kind == "VE":
        return np.ones_like(t), t
    return np.exp(-t), np.sqrt(-np.expm1(-2.0 * t))


def drift(process, x, t, score):
    """PF-ODE velocity dx/dt given the score at (x, t)."""
    if process.kind == "VE":
        return -t * score
    return -x - score


def prior_std(process):
    if process.kind == "VE":
        return process.T
    return math.sqrt(-math.expm1(-2.0 * process.T))


def prior_sample(process, d, n, rng):
    if n < 1:
        raise ValueError(f"prior_sample needs n >= 1, got {n}")
    return rng.standard_normal((n, d)) * prior_std(process)


# -- time grids -------------------------------------------------------------
@dataclass(frozen=True)
class TimeGrid:
    """Strictly decreasing times from ``t_max`` to ``t_min`` (EDM power schedule)."""

    n: int = 41
    t_min: float = T_MIN
    t_max: float = 80.0
    rho: float = RHO

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("a time grid needs at least two points")
        if not 0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")

    @property
    def times(self):
        i = np.arange(self.n)
        a, b = self.t_max ** (1 / self.rho), self.t_min ** (1 / self.rho)
        ts = (a + i / (self.n - 1) * (b - a)) ** self.rho
        ts[0], ts[-1] = self.t_max, self.t_min
        return ts

    @classmethod
    def for_process(cls, process, steps=40, t_min=T_MIN, rho=RHO):
        return cls(n=steps + 1, t_min=t_min, t_max=process.T, rho=rho)

    def to_dict(self):
        return asdict(self)


# -- data and scores ----------------------------------------------------------
@dataclass
class GaussianData:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        self.var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.var <= 0):
            raise ValueError("Gaussian variances must be positive")

    @property
    def d(self):
        return self.mean.shape[0]

    def marginal(self, process, t):
        scale, std = _marginal_arrays(process, t)
        return scale * self.mean, scale**2 * self.var + std**2


def analytic_gaussian_score(data, process, x, t):
    m, v = data.marginal(process, t)
    return -(np.asarray(x, dtype=np.float64) - m) / v


class ScoreModel:
    """A score function s(x, t[, c]) tied to a forward process.

    Subclasses implement :meth:`__call__`; ``x`` has shape (n, d) and ``t`` is
    a scalar time shared by the batch.
    """

    conditional = False

    def __init__(self, process, d):
        self.process = process
        self.d = d

    def __call__(self, x, t, c=None):  # pragma: no cover - abstract
        raise NotImplementedError


class AnalyticScore(ScoreModel):
    """Exact score of Gaussian data; ``classes`` maps condition id -> GaussianData."""

    def __init__(self, process, data=None, classes=None):
        self.data = data
        self.classes = classes or {}
        self.conditional = bool(classes)
        ref = data if data is not None else next(iter(self.classes.values()))
        super().__init__(process, ref.d)

    def __call__(self, x, t, c=None):
        x = np.asarray(x, dtype=np.float64)
        if c is None:
            if self.data is None:
                raise ValueError("unconditional evaluation of a class-only analytic score")
            return analytic_gaussian_score(self.data, self.process, x, t)
        c = np.broadcast_to(np.asarray(c), (x.shape[0],))
        out = np.empty_like(x)
        for cid in np.unique(c):
            sel = c == cid
            out[sel] = analytic_gaussian_score(self.classes[int(cid)], self.process, x[sel], t)
        return out


class MixtureScore(ScoreModel):
    """Exact score of an isotropic Gaussian mixture (optionally per class)."""

    def __init__(self, process, means, stds, weights=None):
        self.means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k = self.means.shape[0]
        self.stds = np.broadcast_to(np.asarray(stds, dtype=np.float64), (k,)).copy()
        w = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        self.weights = w / w.sum()
        super().__init__(process, self.means.shape[1])

    def __call__(self, x, t, c=None):
        x = np.asarray(x, dtype=np.float64)
        scale, std = _marginal_arrays(self.process, t)
        var = scale**2 * self.stds**2 + std**2
        diff = x[:, None, :] - scale * self.means[None]
        logp = np.log(self.weights) - 0.5 * np.sum(diff**2, axis=-1) / var - 0.5 * self.d * np.log(var)
        logp -= logp.max(axis=1, keepdims=True)
        r = np.exp(logp)
        r /= r.sum(axis=1, keepdims=True)
        return -np.einsum("nk,nkd->nd", r / var, diff)

    def sample(self, n, rng):
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        return self.means[comp] + self.stds[comp, None] * rng.standard_normal((n, self.d))


class PerturbedScore(ScoreModel):
    """``base`` plus a constant offset; models a teacher with uniform error ``|eps|``."""

    def __init__(self, base, eps):
        super().__init__(base.process, base.d)
        self.base = base
        self.eps = np.asarray(eps, dtype=np.float64)
        self.conditional = base.conditional

    def __call__(self, x, t, c=None):
        return self.base(x, t, c) + self.eps


class GuidedScore(ScoreModel):
    """omega * s(x, t, c) + (1 - omega) * s(x, t); ``omega`` may be per-sample."""

    def __init__(self, cond_model, marg_model, omega):
        super().__init__(cond_model.process, cond_model.d)
        self.cond_model, self.marg_model = cond_model, marg_model
        w = np.asarray(omega, dtype=np.float64)
        self.omega = float(w) if w.ndim == 0 else w
        self.conditional = True

    def __call__(self, x, t, c=None):
        sc = self.cond_model(x, t, c)
        if np.ndim(self.omega) == 0 and self.omega == 1.0:
            return sc
        sm = self.marg_model(x, t, None)
        if np.ndim(self.omega) == 0 and self.omega == 0.0:
            return sm
        w = self.omega if np.ndim(self.omega) == 0 else self.omega[:, None]
        return w * sc + (1.0 - w) * sm


# -- trained score network ----------------------------------------------------
class ScoreNet(nd.Module):
    """Noise-prediction MLP; score = -eps_hat / std(t).

    Inputs are (c_in * x, log(t) / 4[, class embedding]). Class id ``n_classes``
    is the null label used for classifier-free dropout.
    """

    def __init__(self, d, hidden=(64, 64), activation="silu", n_classes=0, emb_dim=8, sigma_data=1.0, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.n_classes, self.emb_dim, self.sigma_data = d, n_classes, emb_dim, float(sigma_data)
        self.hidden, self.activation = tuple(hidden), activation
        in_dim = d + 1 + (emb_dim if n_classes else 0)
        self.mlp = nd.MLP([in_dim, *hidden, d], activation, rng)
        self.params.merge(self.mlp.params, "mlp")
        if n_classes:
            self.emb = nd.Embedding(n_classes + 1, emb_dim, rng)
            self.params.merge(self.emb.params, "emb")

    def config(self):
        return {
            "d": self.d,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "n_classes": self.n_classes,
            "emb_dim": self.emb_dim,
            "sigma_data": self.sigma_data,
        }

    def eps(self, process, x, t, c=None):
        """eps_hat for batch x (Tensor or array) at per-row times t (array, shape (n,))."""
        t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
        scale, std = _marginal_arrays(process, t)
        c_in = 1.0 / np.sqrt(scale**2 * self.sigma_data**2 + std**2)
        x = x if isinstance(x, nd.Tensor) else nd.Tensor(x)
        parts = [x * c_in, nd.Tensor(np.log(t) / 4.0)]
        if self.n_classes:
            ids = np.full(x.shape[0], self.n_classes) if c is None else np.broadcast_to(np.asarray(c), (x.shape[0],))
            parts.append(self.emb(ids))
        return self.mlp(ops.concat(parts, axis=1))


class NetScore(ScoreModel):
    def __init__(self, process, net):
        super().__init__(process, net.d)
        self.net = net
        self.conditional = net.n_classes > 0
        self.loss_history = []

    def __call__(self, x, t, c=None):
        x = np.asarray(x, dtype=np.float64)
        _, std = marginal_params(self.process, t)
        tt = np.full(x.shape[0], float(t))
        return -self.net.eps(self.process, x, tt, c).data / std


@dataclass
class DSMConfig:
    steps: int = 20000
    batch: int = 256
    lr: float = 1e-3
    t_min: float = T_MIN
    cond_drop: float = 0.1
    ema_decay: float = 0.0
    log_every: int = 100
    lr_decay: bool = False  # linear decay to zero over ``steps``


def train_dsm(sample_fn, process, net, config, rng, callback=None):
    """Denoising score matching with log-uniform time sampling.

    ``sample_fn(n, rng)`` returns data of shape (n, d); for a conditional net it
    returns ``(x, c)``. Loss is ``|eps_hat - xi|^2``, i.e. the conditional-score
    regression weighted by std(t)^2. ``callback(step, model)`` fires every
    ``config.log_every`` steps.
    """
    model = NetScore(process, net)
    opt = nd.OptimizerState(kind="adam", lr=config.lr)
    lo, hi = math.log(config.t_min), math.log(process.T)
    for step in range(config.steps):
        batch = sample_fn(config.batch, rng)
        c = None
        if net.n_classes:
            x0, c = batch
            c = np.where(rng.random(len(c)) < config.cond_drop, net.n_classes, c)
        else:
            x0 = batch
        t = np.exp(rng.uniform(lo, hi, size=config.batch))
        scale, std = _marginal_arrays(process, t[:, None])
        xi = rng.standard_normal(x0.shape)
        xt = scale * x0 + std * xi
        err = net.eps(process, xt, t, c) - xi
        loss = ops.mean(ops.tsum(err * err, axis=1))
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"DSM loss became non-finite at step {step}")
        grads = nd.grad(loss, net.params.trainable())
        if config.lr_decay:
            opt.lr = config.lr * (1.0 - step / config.steps)
        nd.optimizer_step(opt, net.params, grads)
        if config.ema_decay > 0:
            nd.ema_update(net.params, config.ema_decay)
        model.loss_history.append(float(loss.data))
        if callback is not None and (step + 1) % config.log_every == 0:
            callback(step + 1, model)
    return model


# -- PF-ODE ---------------------------------------------------------------------
def _path(grid, t_start, t_end):
    ts = np.asarray(grid.times if isinstance(grid, TimeGrid) else grid, dtype=np.float64)
    lo, hi = min(t_start, t_end), max(t_start, t_end)
    tol = 1e-12 * max(1.0, hi)
    # Below the grid's t_min a single extra segment bridges the truncation gap.
    if lo < 0 or ts.max() < hi - tol or (ts.min() > lo + tol and ts.min() > T_MIN * (1 + 1e-9)):
        raise ValueError(f"grid [{ts.min()}, {ts.max()}] does not span [{lo}, {hi}]")
    inner = ts[(ts > lo + tol) & (ts < hi - tol)]
    inner = np.sort(inner)
    if t_start > t_end:
        inner = inner[::-1]
    return np.concatenate([[t_start], inner, [t_end]])


def solve_pf_ode(model, x_start, t_start, t_end, grid, method="heun", c=None, trajectory=False):
    """Integrate the PF-ODE from t_start to t_end through the grid's interior points."""
    if method not in ("euler", "heun"):
        raise ValueError(f"unknown method {method!r}")
    process = model.process
    path = _path(grid, float(t_start), float(t_end))
    x = np.array(x_start, dtype=np.float64, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    traj = [x.copy()] if trajectory else None
    for t_cur, t_next in zip(path[:-1], path[1:]):
        h = t_next - t_cur
        d_cur = drift(process, x, t_cur, model(x, t_cur, c))
        x_next = x + h * d_cur
        if method == "heun":
            d_next = drift(process, x_next, t_next, model(x_next, t_next, c))
            x_next = x + h * (0.5 * d_cur + 0.5 * d_next)
        if not np.all(np.isfinite(x_next)):
            raise SolverError(f"non-finite state at t={t_next:.6g}")
        x = x_next
        if trajectory:
            traj.append(x.copy())
    out = x[0] if squeeze else x
    if trajectory:
        return out, path, np.stack(traj)
    return out


def ddim_invert(model, x0, grid, c=None, method="heun"):
    """Deterministic latent of x0: solve the PF-ODE from t_min up to T."""
    g = grid.times
    return solve_pf_ode(model, x0, g[-1], g[0], g, method, c)


def ddim_generate(model, z, grid, c=None, method="heun"):
    g = grid.times
    return solve_pf_ode(model, z, g[0], g[-1], g, method, c)


# -- closed-form flows used as oracles --------------------------------------
def gaussian_flow_map(data, process, x, t_from, t_to):
    """Exact PF-ODE transport between two times for Gaussian data (per dimension)."""
    m0, v0 = data.marginal(process, t_from)
    m1, v1 = data.marginal(process, t_to)
    return m1 + (np.asarray(x) - m0) * np.sqrt(v1 / v0)


# -- persistence ----------------------------------------------------------------
def save_score(path, model, grid=None):
    """Checkpoint a trained score plus a JSON sidecar ``<path>.json``."""
    if not isinstance(model, NetScore):
        raise TypeError("only trained network scores are checkpointed")
    meta = {"process": {"kind": model.process.kind, "T": model.process.T}, "net": model.net.config()}
    nd.save_params(path, model.net.params, meta=meta)
    sidecar = {
        "process_kind": model.process.kind,
        "T": model.process.T,
        "grid": grid.to_dict() if grid is not None else None,
        "data_dim": model.d,
    }
    nd.checkpoint.atomic_write(os.fspath(path) + ".json", json.dumps(sidecar, sort_keys=True, indent=2).encode())


def load_score(path):
    _, meta = nd.checkpoint.read(path)
    process = ForwardProcess(**meta["process"])
    net = ScoreNet(**meta["net"])
    nd.load_params(path, net.params)
    return NetScore(process, net)

