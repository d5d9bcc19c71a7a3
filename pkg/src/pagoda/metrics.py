"""Sample-based distances used in place of FID."""

from __future__ import annotations

import numpy as np
from scipy.stats import wasserstein_distance


def w1(a, b):
    """Exact 1-D Wasserstein-1 between two empirical laws.

    Equal sizes use the mean absolute difference of sorted samples; otherwise
    the quantile-function integral from scipy.
    """
    a = np.ravel(np.asarray(a, dtype=np.float64))
    b = np.ravel(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("W1 needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(np.sort(a) - np.sort(b))))
    return float(wasserstein_distance(a, b))


def projections(d, k=64, seed=0):
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        ang = np.arange(k) * np.pi / k
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    v = np.random.default_rng(seed).standard_normal((k, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_w(a, b, k=64):
    """Mean over ``k`` fixed unit directions of the projected 1-D W1."""
    a, b = np.atleast_2d(a), np.atleast_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample dimensions differ")
    P = projections(a.shape[1], k)
    return float(np.mean([w1(a @ p, b @ p) for p in P]))


def mode_fractions(samples, centers):
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        return np.zeros(len(centers))
    dist = np.sum((samples[:, None, :] - np.asarray(centers)[None]) ** 2, axis=-1)
    hits = np.bincount(np.argmin(dist, axis=1), minlength=len(centers))
    return hits / samples.shape[0]


def mode_recall(samples, centers, threshold=0.02):
    """Fraction of modes receiving at least ``threshold`` of the samples."""
    return float(np.mean(mode_fractions(samples, centers) >= threshold))


def correlation(a, b):
    a, b = np.ravel(a), np.ravel(b)
    a, b = a - a.mean(), b - b.mean()
    den = np.sqrt(np.sum(a * a) * np.sum(b * b))
    return float(np.sum(a * b) / den) if den > 0 else 0.0
