"""Classifier-free guidance: guided targets, the guidance-weight posterior,
the guidance-weight estimator and the guided adversarial loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from . import nd
from .diffusion import GuidedScore, ddim_generate, ddim_invert, prior_sample
from .distill import NumericFailure, _CondMLP, adv_terms
from .nd import ops


# -- guided targets -----------------------------------------------------------------
def guided_gaussian(cond, marg, omega):
    """Normalize N(mu_c, v_c)^omega * N(mu_0, v_0)^(1-omega); returns (mean, var)."""
    (mc, vc), (m0, v0) = cond, marg
    prec = omega / vc + (1.0 - omega) / v0
    if np.any(np.asarray(prec) <= 0):
        raise ValueError(f"guided precision {prec} is not positive; the target is not normalizable")
    var = 1.0 / prec
    return var * (omega * mc / vc + (1.0 - omega) * m0 / v0), var


def guided_score(s_cond, s_marg, omega, x, c, t):
    """omega * s_cond(x, t, c) + (1 - omega) * s_marg(x, t)."""
    return omega * s_cond(x, t, c) + (1.0 - omega) * s_marg(x, t, None)


def guided_invert(teacher, x, c, omega, grid, marginal=None, method="heun"):
    """DDIM inversion under the guided score; ``marginal`` defaults to the teacher."""
    model = GuidedScore(teacher, marginal or teacher, omega)
    return ddim_invert(model, x, grid, c, method)


# -- guidance-weight prior ------------------------------------------------------------
@dataclass(frozen=True)
class OmegaPrior:
    """pi(omega): ``uniform`` (a, b), ``truncnorm`` (center, scale, a, b),
    ``point`` (v,) or ``discrete`` (values..., weights...)."""

    kind: str
    args: tuple

    def __post_init__(self):
        if self.kind not in ("uniform", "truncnorm", "point", "discrete"):
            raise ValueError(f"unknown omega prior {self.kind!r}")
        lo = min(self.values) if self.kind == "discrete" else (self.args[0] if self.kind != "truncnorm" else self.args[2])
        if lo < 0:
            raise ValueError("omega prior support must be nonnegative")

    @classmethod
    def parse(cls, spec: str):
        """'uniform:2,10', 'truncnorm:2,3,1,10', 'point:2' or 'discrete:1,2'."""
        kind, _, rest = spec.partition(":")
        vals = tuple(float(v) for v in rest.split(",") if v)
        expected = {"uniform": 2, "truncnorm": 4, "point": 1}
        if kind in expected and len(vals) != expected[kind]:
            raise ValueError(f"{kind} prior takes {expected[kind]} numbers, got {len(vals)}")
        if kind == "discrete":
            vals = vals + (1.0,) * len(vals)
        return cls(kind, vals)

    @property
    def values(self):
        if self.kind == "discrete":
            return np.asarray(self.args[: len(self.args) // 2])
        if self.kind == "point":
            return np.asarray(self.args[:1])
        raise ValueError(f"{self.kind} prior has no finite grid")

    @property
    def weights(self):
        if self.kind == "point":
            return np.ones(1)
        w = np.asarray(self.args[len(self.args) // 2 :], dtype=np.float64)
        return w / w.sum()

    def mean(self):
        if self.kind == "uniform":
            return 0.5 * (self.args[0] + self.args[1])
        if self.kind == "truncnorm":
            c, s, a, b = self.args
            return float(truncnorm.mean((a - c) / s, (b - c) / s, loc=c, scale=s))
        return float(self.values @ self.weights)

    def std(self):
        if self.kind == "uniform":
            return (self.args[1] - self.args[0]) / math.sqrt(12)
        if self.kind == "truncnorm":
            c, s, a, b = self.args
            return float(truncnorm.std((a - c) / s, (b - c) / s, loc=c, scale=s))
        return float(np.sqrt(self.weights @ (self.values - self.mean()) ** 2))

    def sample(self, n, rng):
        if self.kind == "uniform":
            return rng.uniform(self.args[0], self.args[1], size=n)
        if self.kind == "truncnorm":
            c, s, a, b = self.args
            return truncnorm.rvs((a - c) / s, (b - c) / s, loc=c, scale=s, size=n, random_state=rng)
        return rng.choice(self.values, size=n, p=self.weights)

    def to_str(self):
        if self.kind == "discrete":
            return "discrete:" + ",".join(repr(float(v)) for v in self.values)
        return f"{self.kind}:" + ",".join(repr(float(v)) for v in self.args)


CAPTION_PRIOR = OmegaPrior("uniform", (2.0, 10.0))
RECAPTION_PRIOR = OmegaPrior("truncnorm", (2.0, 3.0, 1.0, 10.0))


# -- closed-form instances ---------------------------------------------------------------
class GaussianCFG:
    """1-D Gaussian classes, a Gaussian marginal and a discrete omega prior."""

    def __init__(self, classes, marginal, prior: OmegaPrior, class_probs=None):
        self.classes = {int(k): (float(m), float(v)) for k, (m, v) in classes.items()}
        self.marginal = (float(marginal[0]), float(marginal[1]))
        self.prior = prior
        k = len(self.classes)
        self.class_probs = np.full(k, 1.0 / k) if class_probs is None else np.asarray(class_probs, dtype=np.float64)

    def likelihood(self, x, c):
        """p(x | c, omega) for every omega on the prior grid."""
        out = []
        for w in self.prior.values:
            m, v = guided_gaussian(self.classes[int(c)], self.marginal, w)
            out.append(math.exp(-0.5 * (x - m) ** 2 / v) / math.sqrt(2 * math.pi * v))
        return np.asarray(out)


class TabularCFG:
    """Finite support ``xs`` with per-class tables ``p(x_k | c)``.

    The guided table is ``p(x|c,omega) ∝ p(x|c)^omega p(x)^(1-omega)`` over the
    support, with ``p(x) = sum_c p(c) p(x|c)``.
    """

    def __init__(self, xs, cond_tables, prior: OmegaPrior, class_probs=None):
        self.xs = np.asarray(xs, dtype=np.float64)
        self.cond = np.asarray(cond_tables, dtype=np.float64)
        self.cond = self.cond / self.cond.sum(axis=1, keepdims=True)
        C, K = self.cond.shape
        if K != len(self.xs):
            raise ValueError("table width must match the support size")
        self.class_probs = np.full(C, 1.0 / C) if class_probs is None else np.asarray(class_probs, dtype=np.float64)
        self.prior = prior
        self.marg = self.class_probs @ self.cond
        w = prior.values[:, None, None]
        g = self.cond[None] ** w * self.marg[None, None] ** (1.0 - w)
        self.guided = g / g.sum(axis=2, keepdims=True)  # (n_omega, C, K)

    @property
    def n_classes(self):
        return self.cond.shape[0]

    def index(self, x):
        return int(np.argmin(np.abs(self.xs - x)))

    def likelihood(self, x, c):
        return self.guided[:, int(c), self.index(x)]

    def joint(self):
        """p(c) pi(omega) p(x|c,omega) as an (n_omega, C, K) table."""
        return self.prior.weights[:, None, None] * self.class_probs[None, :, None] * self.guided

    def data_joint(self):
        """p(x, c) with omega marginalized, shape (C, K)."""
        return self.joint().sum(axis=0)

    def posterior_table(self):
        J = self.joint()
        return J / J.sum(axis=0, keepdims=True)

    def posterior_mean_table(self):
        return np.einsum("w,wck->ck", self.prior.values, self.posterior_table())

    def sample(self, c, omega, rng):
        """Exact draws from p(x | c, omega); omega must be on the prior grid."""
        c = np.asarray(c, dtype=int)
        wi = np.searchsorted(self.prior.values, omega)
        u = rng.random(len(c))
        cdf = np.cumsum(self.guided[wi, c], axis=1)
        k = np.minimum((u[:, None] > cdf).sum(axis=1), len(self.xs) - 1)
        return self.xs[k][:, None]


def omega_posterior(inst, x, c):
    """p(omega | x, c) on the prior grid via the Bayes formula."""
    like = inst.likelihood(x, c)
    unnorm = inst.prior.weights * like
    Z = unnorm.sum()
    if not Z > 0:
        raise ValueError("likelihood vanishes for every omega on the grid")
    return unnorm / Z


def bayes_identity_gap(inst: TabularCFG):
    """max |p(c) pi(omega) p(x|c,omega) - p(x,c) p(omega|x,c)| over the table."""
    lhs = inst.joint()
    rhs = inst.data_joint()[None] * inst.posterior_table()
    return float(np.max(np.abs(lhs - rhs)))


def tabular_least_squares(inst: TabularCFG):
    """Minimizer of E(omega - a(x,c))^2 over tabular a, via weighted lstsq."""
    J = inst.joint()
    nW, C, K = J.shape
    rows, cols, w, y = [], [], [], []
    for i in range(nW):
        for c in range(C):
            for k in range(K):
                rows.append(len(rows))
                cols.append(c * K + k)
                w.append(math.sqrt(J[i, c, k]))
                y.append(inst.prior.values[i])
    A = np.zeros((len(rows), C * K))
    A[rows, cols] = w
    sol = np.linalg.lstsq(A, np.asarray(w) * np.asarray(y), rcond=None)[0]
    return sol.reshape(C, K)


# -- estimators ------------------------------------------------------------------------
class PosteriorEstimator:
    """Exact omega point estimate from a closed-form instance (mean or MAP)."""

    def __init__(self, inst, mode="mean"):
        if mode not in ("mean", "map"):
            raise ValueError("mode must be 'mean' or 'map'")
        self.inst, self.mode = inst, mode

    def predict(self, x, c):
        x = np.ravel(x)
        c = np.broadcast_to(np.asarray(c), x.shape)
        out = np.empty(len(x))
        for i, (xi, ci) in enumerate(zip(x, c)):
            post = omega_posterior(self.inst, xi, ci)
            grid = self.inst.prior.values
            out[i] = grid[np.argmax(post)] if self.mode == "map" else post @ grid
        return out


class OmegaEstimator(_CondMLP):
    """Regressor omega_phi(x, c) on ``[x, emb(c)]``.

    ``mode='mean'`` regresses omega (L2, so the optimum is the posterior mean);
    ``mode='map'`` needs a discrete prior and classifies over its grid.
    """

    def __init__(self, d, prior: OmegaPrior, n_classes=0, hidden=(64, 64), activation="silu", emb_dim=8, in_scale=1.0, mode="mean", rng=None):
        if mode not in ("mean", "map"):
            raise ValueError("mode must be 'mean' or 'map'")
        k = len(prior.values) if mode == "map" else 1
        super().__init__(d, k, hidden, activation, n_classes, emb_dim, False, in_scale, rng)
        self.d, self.prior, self.mode = d, prior, mode
        self.loc, self.scale = prior.mean(), max(prior.std(), 1e-3)

    def forward(self, x, c=None, omega=None):
        out = self.mlp(self._inputs(x, c, None))
        if self.mode == "map":
            return out
        return ops.reshape(out, (-1,)) * self.scale + self.loc

    def predict(self, x, c=None):
        out = self(np.asarray(x, dtype=np.float64), c).data
        if self.mode == "map":
            return self.prior.values[np.argmax(out, axis=1)]
        return out

    def loss(self, x, c, omega):
        if self.mode == "map":
            logits = self(x, c)
            target = np.searchsorted(self.prior.values, omega)
            mx = logits.data.max(axis=1, keepdims=True)
            lse = ops.log(ops.tsum(ops.exp(logits - mx), axis=1)) + mx[:, 0]
            picked = ops.tsum(logits * np.eye(logits.shape[1])[target], axis=1)
            return ops.mean(lse - picked)
        diff = self(x, c) - omega
        return ops.mean(diff * diff)

    def config(self):
        return {"d": self.d, "prior": self.prior.to_str(), "mode": self.mode, **super().config()}


@dataclass
class EstimatorConfig:
    steps: int = 2000
    batch: int = 256
    lr: float = 1e-3
    lr_decay: bool = True
    log_every: int = 100


def train_omega_estimator(sampler, prior: OmegaPrior, cond_sampler, config, rng, est=None, d=None, n_classes=0, **kw):
    """Fit omega_phi on draws x = sampler(c, omega, rng) with omega ~ pi, c ~ cond_sampler.

    Returns ``(estimator, mse_trace)``; ``cond_sampler(n, rng)`` may be None for
    unconditional teachers.
    """
    if est is None:
        if d is None:
            raise ValueError("give either an estimator or the data dimension")
        est = OmegaEstimator(d, prior, n_classes=n_classes, rng=rng, **kw)
    opt = nd.OptimizerState(kind="adam", lr=config.lr)
    trace = []
    for step in range(config.steps):
        if config.lr_decay:
            opt.lr = config.lr * (1.0 - step / config.steps)
        c = cond_sampler(config.batch, rng) if cond_sampler is not None else None
        w = prior.sample(config.batch, rng)
        x = sampler(c, w, rng)
        L = est.loss(x, c, w)
        if not np.isfinite(L.data):
            raise NumericFailure(f"non-finite estimator loss at step {step}")
        nd.optimizer_step(opt, est.params, nd.grad(L, est.params.trainable()))
        if (step + 1) % config.log_every == 0 or step + 1 == config.steps:
            trace.append((step + 1, float(L.data)))
    return est, trace


def guided_ddim_sampler(cond_model, marg_model, grid):
    """sampler(c, omega, rng) drawing x = DDIM(z) under per-sample guidance."""

    def sample(c, omega, rng):
        n = len(omega)
        z = prior_sample(cond_model.process, cond_model.d, n, rng)
        return ddim_generate(GuidedScore(cond_model, marg_model, omega), z, grid, c)

    return sample


# -- guided adversarial loss ---------------------------------------------------------------
def cfg_adv_loss(G, D, x, c, estimator, z, prior=None, rng=None, c_fake=None, omega_fake=None, weights_real=None, weights_fake=None):
    """E log sig(d(x, c, omega_hat(x, c))) + E log(1 - sig(d(G(z, c', w), c', w))).

    Fake conditions default to c' drawn from the data batch and w ~ prior.
    Optional weights (summing to one) turn the expectations into exact sums.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0 or len(z) == 0:
        raise ValueError("batch must be nonempty")
    if x.shape[1] != D.d:
        raise ValueError(f"data dim {x.shape[1]} != discriminator input {D.d}")
    n = len(z)
    if c_fake is None and c is not None:
        c_fake = np.asarray(c)[rng.integers(len(c), size=n)]
    if omega_fake is None:
        omega_fake = prior.sample(n, rng)
    omega_hat = estimator.predict(x, c)
    fake = G(z, c_fake, omega_fake)
    er, ef = adv_terms(D, x, fake, c, c_fake, omega_hat, omega_fake, weights_real, weights_fake)
    return er + ef
