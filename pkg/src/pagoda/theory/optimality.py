"""Exhaustive search over generator tables on finite alphabets.

Both objectives substitute the optimal discriminator, for which the
adversarial term equals ``-2 log 2 + 2 JS(p_data, p_G)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import jensenshannon

MAX_CANDIDATES = 1_000_000
TOL = 1e-12


@dataclass
class TabularOptInstance:
    xs: np.ndarray  # data alphabet values
    p_data: np.ndarray
    p_prior: np.ndarray  # latent alphabet is range(len(p_prior))
    encoder: np.ndarray  # data index -> latent index
    teacher: np.ndarray  # latent index -> data index (the teacher's generation table)
    lam: float = 1.0
    name: str = "custom"

    def __post_init__(self):
        self.xs = np.asarray(self.xs, float)
        self.p_data, self.p_prior = np.asarray(self.p_data, float), np.asarray(self.p_prior, float)
        self.encoder, self.teacher = np.asarray(self.encoder, int), np.asarray(self.teacher, int)
        for w in (self.p_data, self.p_prior):
            if np.any(w < 0) or abs(w.sum() - 1) > 1e-12:
                raise ValueError("distributions must be normalized")
        if self.encoder.shape != self.xs.shape or np.any((self.encoder < 0) | (self.encoder >= len(self.p_prior))):
            raise ValueError("encoder table must map every data symbol to a latent symbol")
        if self.teacher.shape != self.p_prior.shape or np.any((self.teacher < 0) | (self.teacher >= len(self.xs))):
            raise ValueError("teacher table must map every latent symbol to a data symbol")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")

    def push(self, table):
        return np.bincount(table, weights=self.p_prior, minlength=len(self.xs))

    def teacher_is_exact(self):
        return bool(np.allclose(self.push(self.teacher), self.p_data, atol=1e-12))

    def to_dict(self):
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in vars(self).items()}


def adv_opt(p_data, p_g):
    """Adversarial loss at the optimal discriminator."""
    return -2 * np.log(2) + 2 * jensenshannon(p_data, p_g, base=np.e) ** 2


def tv(p, q):
    return 0.5 * float(np.abs(p - q).sum())


def losses(inst, table):
    xg = inst.xs[table]
    rec = float(np.sum(inst.p_data * (inst.xs - xg[inst.encoder]) ** 2))
    kd = float(np.sum(inst.p_prior * (inst.xs[inst.teacher] - xg) ** 2))
    return {"rec": rec, "kd": kd, "adv": float(adv_opt(inst.p_data, inst.push(table)))}


def optimality_search(inst: TabularOptInstance, mode="pagoda"):
    """Enumerate every generator table and keep the minimizers of the objective."""
    if mode not in ("pagoda", "kd_gan"):
        raise ValueError(f"unknown mode {mode!r}")
    nx, nz = len(inst.xs), len(inst.p_prior)
    if nx**nz > MAX_CANDIDATES:
        raise ValueError(f"{nx}^{nz} generator tables exceed {MAX_CANDIDATES}; use smaller alphabets")
    tables = np.array(list(itertools.product(range(nx), repeat=nz)), dtype=int)
    L = [losses(inst, t) for t in tables]
    first = np.array([l["rec" if mode == "pagoda" else "kd"] for l in L])
    adv = np.array([l["adv"] for l in L])
    total = first + inst.lam * adv

    def argmins(v):
        return np.flatnonzero(v <= v.min() + TOL)

    best = argmins(total)
    gaps = [tv(inst.push(tables[i]), inst.p_data) for i in best]
    first_set, adv_set = set(argmins(first).tolist()), set(argmins(adv).tolist())
    return {
        "mode": mode,
        "objective": float(total.min()),
        "minimizers": tables[best].tolist(),
        "p_G": [inst.push(tables[i]).tolist() for i in best],
        "gaps": gaps,
        "max_gap": float(max(gaps)),
        "min_gap": float(min(gaps)),
        # whether some table minimizes both terms separately
        "common_minimizer": bool(first_set & adv_set),
        "n_candidates": len(tables),
    }


def pagoda_instance(lam=1.0):
    """Three data symbols, a four-symbol latent alphabet with one unused symbol.

    The prior is the encoder pushforward of the data, so decoding the pairs
    is also distribution matching.
    """
    p = np.array([0.2, 0.5, 0.3])
    enc = np.array([0, 1, 3])
    prior = np.bincount(enc, weights=p, minlength=4)
    return TabularOptInstance([0.0, 1.0, 2.0], p, prior, enc, np.array([0, 1, 1, 2]), lam, "pagoda-3")


def kd_gan_instance(lam=1.0):
    """Uniform data on {0,1,2}; the teacher maps two latents to 0 and never produces 1."""
    return TabularOptInstance([0.0, 1.0, 2.0], np.full(3, 1 / 3), np.full(3, 1 / 3), np.arange(3), np.array([0, 0, 2]), lam, "kd-wrong-teacher")
