"""Bias-corrected Adam."""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    v: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)


def adam_step(params, grads, state):
    """One in-place Adam update of every parameter in ``params``.

    ``grads`` maps parameter names to gradient arrays.  All gradients are
    checked before any parameter is touched, so a non-finite gradient
    leaves the store unchanged.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in params:
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.value -= step.astype(p.value.dtype)
