from __future__ import annotations

import hashlib

import numpy as np

from .tensor import Tensor


class ParamSet:
    """Named parameter tensors with trainable flags and optional EMA shadows."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.ema: dict[str, np.ndarray] = {}

    def add(self, name, value, trainable=True):
        if name in self._params:
            raise KeyError(f"duplicate parameter name '{name}'")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = name
        self._params[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self):
        return {k: t for k, t in self._params.items() if self._trainable[k]}

    def is_trainable(self, name):
        return self._trainable[name]

    def set_trainable(self, names, flag=True):
        for n in names:
            if n not in self._params:
                raise KeyError(n)
            self._trainable[n] = flag

    def freeze_all(self):
        for n in self._params:
            self._trainable[n] = False

    def count(self, trainable_only=False):
        return int(sum(t.size for k, t in self._params.items() if self._trainable[k] or not trainable_only))

    def state(self):
        """Copy of parameter values keyed by name."""
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state):
        for k, v in state.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter '{k}'")
            if v.shape != self._params[k].shape:
                raise ValueError(f"shape mismatch for '{k}': {v.shape} vs {self._params[k].shape}")
            self._params[k].data = np.array(v, dtype=np.float64)

    def digest(self, names=None):
        """SHA-256 over the raw bytes of the selected parameters, in name order."""
        h = hashlib.sha256()
        for k in names if names is not None else self._params:
            h.update(k.encode())
            h.update(np.ascontiguousarray(self._params[k].data).tobytes())
        return h.hexdigest()

    def merge(self, other, prefix):
        """Register every parameter of ``other`` under ``prefix`` (shared tensors)."""
        for k, t in other.items():
            name = f"{prefix}.{k}"
            self._params[name] = t
            self._trainable[name] = other.is_trainable(k)
        for k, v in other.ema.items():
            self.ema[f"{prefix}.{k}"] = v


def ema_update(params, decay):
    """shadow <- decay*shadow + (1-decay)*param; first call copies params."""
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must lie in [0, 1), got {decay}")
    for k, t in params.items():
        if k not in params.ema:
            params.ema[k] = t.data.copy()
        else:
            params.ema[k] = decay * params.ema[k] + (1.0 - decay) * t.data
    return params.ema


def swap_in_ema(params):
    """Return a state dict of current values and load EMA shadows in their place."""
    saved = params.state()
    params.load_state({k: v for k, v in params.ema.items() if k in params})
    return saved
