from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, ShapeError


@dataclass
class AdamState:
    lr: float = 5e-4
    b1: float = 0.5
    b2: float = 0.9
    eps: float = 1e-7
    t_step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """Apply one bias-corrected Adam update to ``params`` in place.

    ``params`` and ``grads`` are dicts of arrays with matching keys.  Every
    gradient is checked before anything is touched, so a non-finite
    gradient leaves both parameters and moments unchanged.
    """
    for key, p in params.items():
        if key not in grads:
            raise KeyError(f"no gradient for parameter {key!r}")
        g = grads[key]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {key!r} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {key!r}")

    state.t_step += 1
    t = state.t_step
    bc1 = 1.0 - state.b1 ** t
    bc2 = 1.0 - state.b2 ** t
    for key, p in params.items():
        g = grads[key].astype(p.dtype, copy=False)
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m = state.m[key]
        v = state.v[key]
        m *= state.b1
        m += (1.0 - state.b1) * g
        v *= state.b2
        v += (1.0 - state.b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return params, state
