"""Builtin toy datasets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Dataset:
    name: str
    d: int
    sampler: object = field(repr=False)
    centers: np.ndarray | None = None  # mode centres for recall metrics
    shape: tuple | None = None  # (H, W, C) for image-like data
    n_classes: int = 0

    def sample(self, n, rng):
        """(n, d) array; conditional datasets return ``(x, labels)``."""
        return self.sampler(n, rng)


def _mixture(centers, std, weights=None):
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))

    def sample(n, rng):
        k = rng.choice(len(centers), size=n, p=weights)
        return centers[k] + std * rng.standard_normal((n, centers.shape[1]))

    return sample


def gauss1d(mean=0.0, std=1.0):
    return Dataset("gauss1d", 1, lambda n, rng: mean + std * rng.standard_normal((n, 1)), np.array([[mean]]))


def bimodal1d(sep=2.0, std=0.5):
    centers = np.array([[-sep], [sep]])
    return Dataset("bimodal1d", 1, _mixture(centers, std), centers)


def eight_gaussians_2d(radius=2.0, std=0.1):
    ang = np.arange(8) * np.pi / 4
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return Dataset("eight-gaussians-2d", 2, _mixture(centers, std), centers)


def rings_2d(radii=(1.0, 2.0), noise=0.05):
    radii = np.asarray(radii, dtype=np.float64)

    def sample(n, rng):
        r = radii[rng.integers(len(radii), size=n)] + noise * rng.standard_normal(n)
        a = rng.uniform(0, 2 * np.pi, size=n)
        return np.stack([r * np.cos(a), r * np.sin(a)], axis=1)

    return Dataset("rings-2d", 2, sample)


def smooth_signal_1d(d=8):
    """Random low-frequency sinusoids sampled on ``d`` points (super-resolution toy)."""
    j = np.arange(d) + 0.5

    def sample(n, rng):
        amp = rng.uniform(0.5, 1.5, size=(n, 1))
        phase = rng.uniform(0, 2 * np.pi, size=(n, 1))
        return amp * np.sin(2 * np.pi * j / d + phase)

    return Dataset("smooth-signal-1d", d, sample)


def synthetic_grid_images(size=8, width=1.5):
    """Single Gaussian blob at a random position on a size x size grid."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5

    def sample(n, rng):
        cy, cx = rng.uniform(1.5, size - 1.5, size=(2, n, 1, 1))
        img = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
        return img.reshape(n, size * size)

    return Dataset("synthetic-grid-images", size * size, sample, shape=(size, size, 1))


def labelled_gauss1d(means=(-1.0, 1.0), std=1.0):
    """Class-conditional 1-D Gaussians with uniform class prior."""
    means = np.asarray(means, dtype=np.float64)

    def sample(n, rng):
        c = rng.integers(len(means), size=n)
        return means[c, None] + std * rng.standard_normal((n, 1)), c

    return Dataset("labelled-gauss1d", 1, sample, means[:, None], n_classes=len(means))


BUILTIN = {
    "gauss1d": gauss1d,
    "bimodal1d": bimodal1d,
    "eight-gaussians-2d": eight_gaussians_2d,
    "rings-2d": rings_2d,
    "synthetic-grid-images": synthetic_grid_images,
    "smooth-signal-1d": smooth_signal_1d,
    "labelled-gauss1d": labelled_gauss1d,
}


def get_dataset(name, **kwargs):
    if name not in BUILTIN:
        raise KeyError(f"unknown dataset {name!r}; choose from {sorted(BUILTIN)}")
    return BUILTIN[name](**kwargs)
