"""Wasserstein error bounds for a one-step generator on a 1-D Gaussian VP instance.

Data is N(0, sigma^2). The teacher score is the exact score plus a constant
``eps``, so teacher inversion is the affine map z = alpha x + beta and every
term of both bounds has a closed form. The generator is G(z) = a z + b.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


class BoundAssumptionError(ValueError):
    pass


@dataclass
class BoundInstance:
    sigma: float
    T: float
    eps: float = 0.0
    delta: float | None = None  # None: half the admissible maximum
    t0: float = 0.0  # lower end of the time integral (a solver's t_min)

    @property
    def gamma(self):
        return 1.0 / self.sigma**2

    @property
    def delta_max(self):
        e = math.exp(-2 * self.T)
        return e / (3 - e)

    @property
    def h(self):
        e = math.exp(-2 * self.T)
        d = self.delta if self.delta is not None else 0.5 * self.delta_max
        return self.gamma / (e + self.gamma * (1 - e)) - (1 + d)

    def v(self, t):
        return 1 + (self.sigma**2 - 1) * math.exp(-2 * t)

    @property
    def prior_std(self):
        return math.sqrt(-math.expm1(-2 * self.T))

    def teacher_inversion(self):
        """(alpha, beta) with teacher inversion z = alpha x + beta."""
        k = self.sigma**2 - 1
        F = lambda t: math.log(math.exp(t) + math.sqrt(math.exp(2 * t) + k))  # noqa: E731
        alpha = math.sqrt(self.v(self.T) / self.v(self.t0))
        beta = -self.eps * math.sqrt(self.v(self.T)) * (F(self.T) - F(self.t0))
        return alpha, beta

    def exact_generator(self, scale=1.0):
        """G whose pushforward of the prior is the data, optionally rescaled."""
        return scale * self.sigma / self.prior_std, 0.0

    def distilled_generator(self):
        """Affine G that inverts the teacher exactly on the data (zero reconstruction loss)."""
        alpha, beta = self.teacher_inversion()
        return 1.0 / alpha, -beta / alpha

    def check_w2(self):
        if self.gamma <= 1.5:
            raise BoundAssumptionError(f"strong concavity gamma = {self.gamma:.4g} must exceed 3/2")
        d = self.delta if self.delta is not None else 0.5 * self.delta_max
        if not 0 < d < self.delta_max:
            raise BoundAssumptionError(f"slack delta = {d:g} outside (0, {self.delta_max:.6g})")
        if self.h <= 0:
            raise BoundAssumptionError(f"h(gamma, T) = {self.h:.4g} must be positive")

    def check_w1(self):
        if self.sigma <= 0 or self.T <= 0:
            raise BoundAssumptionError("need sigma > 0 and T > 0")

    def to_dict(self):
        return {"sigma": self.sigma, "T": self.T, "eps": self.eps, "delta": self.delta, "t0": self.t0, "gamma": self.gamma}


def mean_abs_normal(mu, s):
    """E|mu + s Z| for Z ~ N(0, 1)."""
    s = abs(s)
    if s == 0:
        return abs(mu)
    r = mu / s
    return float(s * math.sqrt(2 / math.pi) * math.exp(-0.5 * r * r) + mu * (1 - 2 * norm.cdf(-r)))


def w1_gaussians(m1, s1, m2, s2):
    # comonotone coupling: quantiles differ by (m1-m2) + (s1-s2) Z
    return mean_abs_normal(m1 - m2, s1 - s2)


def w2_gaussians(m1, s1, m2, s2):
    return math.hypot(m1 - m2, s1 - s2)


def w1_empirical_gaussian(samples, mu, s):
    """Exact W1 between an empirical measure and N(mu, s^2) via the quantile integral."""
    x = np.sort(np.asarray(samples, float))
    n = len(x)
    edges = norm.ppf(np.arange(n + 1) / n)  # standardized band edges, +-inf at the ends
    c = (x - mu) / s  # sample positions in standardized units

    # int over band [lo, hi] of |u - c| phi(u) du, split at c
    def part(lo, hi, c):
        return (norm.pdf(lo) - norm.pdf(hi)) - c * (norm.cdf(hi) - norm.cdf(lo))

    lo, hi = edges[:-1], edges[1:]
    mid = np.clip(c, lo, hi)
    val = -part(lo, mid, c) + part(mid, hi, c)
    return float(s * np.sum(val))


def _terms_common(inst, a, b):
    alpha, beta = inst.teacher_inversion()
    return alpha, beta, abs(a)


def w2_bound_check(inst: BoundInstance, G=None):
    """lhs = W2(G pushforward of the prior, data); rhs is the sum of the bound terms."""
    inst.check_w2()
    a, b = G if G is not None else inst.exact_generator()
    alpha, beta, Lam = _terms_common(inst, a, b)
    h, T, s = inst.h, inst.T, inst.sigma
    d = inst.delta if inst.delta is not None else 0.5 * inst.delta_max
    terms = {
        "rec": math.sqrt((1 - a * alpha) ** 2 * s**2 + (a * beta + b) ** 2),
        "teacher_flow": abs(beta) / alpha,
        "inversion": (Lam + math.exp(-h * T / 2)) * abs(beta),
        "score": abs(inst.eps) / math.sqrt(2 * d * h) * math.sqrt(-math.expm1(-h * T)),
        "prior": math.exp(-T / 2) * s * Lam,
    }
    lhs = w2_gaussians(b, abs(a) * inst.prior_std, 0.0, s)
    rhs = sum(terms.values())
    return {"claim": "w2", "lhs": lhs, "rhs": rhs, "terms": terms, "holds": bool(lhs <= rhs + 1e-9), "ratio": lhs / rhs}


def w1_bound_check(inst: BoundInstance, G=None, nu="oracle", rng=None):
    """W1 variant; ``nu`` is "oracle" or ("empirical", N) / an array of data samples."""
    inst.check_w1()
    a, b = G if G is not None else inst.exact_generator()
    alpha, beta, Lam = _terms_common(inst, a, b)
    T, s = inst.T, inst.sigma
    CT = math.exp(T) * math.sqrt(inst.v(T)) / s
    if isinstance(nu, str) and nu == "oracle":
        rec = mean_abs_normal(a * beta + b, (1 - a * alpha) * s)
        inv = abs(beta)
        m = s * math.sqrt(2 / math.pi)
        lhs = w1_gaussians(b, abs(a) * inst.prior_std, 0.0, s)
    else:
        if isinstance(nu, tuple):
            rng = rng if rng is not None else np.random.default_rng(0)
            xs = rng.standard_normal(nu[1]) * s
        else:
            xs = np.asarray(nu, float)
        rec = float(np.mean(np.abs(xs - (a * (alpha * xs + beta) + b))))
        inv = w1_empirical_gaussian(alpha * xs + beta, 0.0, math.sqrt(inst.v(T)))
        m = float(np.mean(np.abs(xs)))
        lhs = w1_empirical_gaussian(xs, b, abs(a) * inst.prior_std) if a != 0 else float(np.mean(np.abs(xs - b)))
    terms = {
        "rec": rec,
        "teacher_flow": abs(beta) / alpha,
        "score": CT * T * abs(inst.eps),
        "inversion": (CT + Lam) * inv,
        "prior": math.exp(-T) * m * Lam,
    }
    rhs = sum(terms.values())
    return {"claim": "w1", "lhs": lhs, "rhs": rhs, "terms": terms, "holds": bool(lhs <= rhs + 1e-9), "ratio": lhs / rhs}
