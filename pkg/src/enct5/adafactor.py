"""Adafactor with factored second moments, no momentum and a constant step size."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DECAY_EXPONENT = -0.8
EPS1 = 1e-30
CLIP_THRESHOLD = 1.0


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class AdafactorState:
    step: int = 0
    row: dict[str, np.ndarray] = field(default_factory=dict)
    col: dict[str, np.ndarray] = field(default_factory=dict)
    full: dict[str, np.ndarray] = field(default_factory=dict)


def decay_rate(step: int, exponent: float = DECAY_EXPONENT) -> float:
    return 1.0 - step ** exponent


def factored_second_moment(row: np.ndarray, col: np.ndarray) -> np.ndarray:
    """Rank-1 reconstruction ``outer(R, C) / mean(R)``."""
    return np.outer(row, col) / row.mean()


def adafactor_step(params, grads: dict[str, np.ndarray], state: AdafactorState, lr: float,
                   clip_threshold: float = CLIP_THRESHOLD, eps1: float = EPS1,
                   decay_exponent: float = DECAY_EXPONENT) -> AdafactorState:
    """Apply one update in place to ``params`` (name -> Tensor) from ``grads``.

    Parameters without an entry in ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name} at step {state.step + 1}")
    state.step += 1
    beta2 = decay_rate(state.step, decay_exponent)
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        g2 = g * g + eps1
        if g.ndim == 2:
            r = g2.mean(axis=1)
            c = g2.mean(axis=0)
            if name in state.row:
                r = beta2 * state.row[name] + (1.0 - beta2) * r
                c = beta2 * state.col[name] + (1.0 - beta2) * c
            state.row[name], state.col[name] = r, c
            v = factored_second_moment(r, c)
        else:
            v = g2
            if name in state.full:
                v = beta2 * state.full[name] + (1.0 - beta2) * v
            state.full[name] = v
        u = g / np.sqrt(v)
        rms = np.sqrt(np.mean(u * u))
        u = u / max(1.0, rms / clip_threshold)
        p.data = (p.data - lr * u).astype(p.data.dtype, copy=False)
    return state
