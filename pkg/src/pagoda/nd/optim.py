from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

KINDS = ("sgd", "adam", "radam")


@dataclass
class OptimizerState:
    kind: str = "adam"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind '{self.kind}'")


def optimizer_step(state, params, grads):
    """Apply one update to the trainable entries of ``params`` in place.

    ``grads`` maps parameter name -> gradient array; every name must be a
    trainable parameter with a matching shape.
    """
    trainable = params.trainable()
    for name, g in grads.items():
        if name not in trainable:
            raise KeyError(f"gradient for non-trainable or unknown parameter '{name}'")
        if np.shape(g) != trainable[name].shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter '{name}' {trainable[name].shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.betas
    for name, g in grads.items():
        p = trainable[name]
        if state.kind == "sgd":
            p.data = p.data - state.lr * g
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        bc1 = 1.0 - b1**t
        m_hat = m / bc1
        if state.kind == "adam":
            v_hat = v / (1.0 - b2**t)
            p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            rho_inf = 2.0 / (1.0 - b2) - 1.0
            rho_t = rho_inf - 2.0 * t * b2**t / (1.0 - b2**t)
            if rho_t > 5.0:
                v_hat = np.sqrt(v / (1.0 - b2**t))
                r = math.sqrt((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t))
                p.data = p.data - state.lr * r * m_hat / (v_hat + state.eps)
            else:
                p.data = p.data - state.lr * m_hat
    return params, state
