from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamSet

ACTIVATIONS = {"relu": T.relu, "silu": T.silu, "tanh": T.tanh}


class Module:
    """Base for differentiable modules; subclasses register into ``self.params``."""

    def __init__(self):
        self.params = ParamSet()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError


def init_weight(rng, fan_in, fan_out, kind="default"):
    if kind == "zeros":
        return np.zeros((fan_in, fan_out))
    if kind == "identity":
        if fan_in != fan_out:
            raise ValueError("identity init needs a square layer")
        return np.eye(fan_in)
    scale = np.sqrt(1.0 / fan_in)
    return rng.uniform(-scale, scale, size=(fan_in, fan_out)) * np.sqrt(3.0)


class Linear(Module):
    def __init__(self, fan_in, fan_out, rng=None, init="default", prefix="", params=None):
        super().__init__()
        if params is not None:
            self.params = params
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fan_in, self.fan_out = fan_in, fan_out
        self.w = self.params.add(f"{prefix}w", init_weight(rng, fan_in, fan_out, init))
        self.b = self.params.add(f"{prefix}b", np.zeros(fan_out))

    def forward(self, x):
        return x @ self.w + self.b

    def flops(self, n_rows):
        return 2 * n_rows * self.fan_in * self.fan_out


class MLP(Module):
    """Dense stack; the activation is applied between layers, not after the last."""

    def __init__(self, widths, activation="silu", rng=None, init="default", last_init=None):
        super().__init__()
        if len(widths) < 2:
            raise ValueError(f"an MLP needs at least input and output widths, got {list(widths)}")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {list(widths)}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation '{activation}'; choose from {sorted(ACTIVATIONS)}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.widths = list(widths)
        self.activation = activation
        self.act = ACTIVATIONS[activation]
        self.layers = []
        n = len(widths) - 1
        for i in range(n):
            kind = last_init if (i == n - 1 and last_init) else init
            self.layers.append(Linear(widths[i], widths[i + 1], rng, kind, prefix=f"l{i}.", params=self.params))

    @property
    def last(self):
        return self.layers[-1]

    def forward(self, x):
        h = x
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = self.act(h)
        return h

    def features(self, x):
        """Activations feeding the final layer."""
        h = x
        for layer in self.layers[:-1]:
            h = self.act(layer(h))
        return h

    def flops(self, n_rows):
        return sum(layer.flops(n_rows) for layer in self.layers)


def build_mlp(layer_widths, activation="silu", rng=None, init="default"):
    if not layer_widths:
        raise ValueError("empty width list")
    return MLP(layer_widths, activation, rng, init)


class Embedding(Module):
    """Lookup table for integer condition ids."""

    def __init__(self, n, dim, rng=None, prefix="emb."):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.table = self.params.add(f"{prefix}table", rng.normal(0.0, 1.0, size=(n, dim)))

    def forward(self, ids):
        return T.take(self.table, np.asarray(ids, dtype=np.int64), axis=0)
