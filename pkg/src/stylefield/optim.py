"""Adam with bias correction over lists of arrays, updated in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8, advance=True):
    """One Adam update of ``params`` (in place).

    ``lr`` is a float or one value per parameter. With ``advance=False`` the
    step counter is assumed to have been incremented already (several
    parameter groups sharing one counter).
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and state must have the same length")
    if advance:
        state.step += 1
    b1, b2 = betas
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    lrs = lr if isinstance(lr, (list, tuple)) else [lr] * len(params)
    for p, g, m, v, a in zip(params, grads, state.m, state.v, lrs):
        if p.shape != g.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= (a * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return params, state
