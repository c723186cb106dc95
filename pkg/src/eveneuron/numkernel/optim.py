"""Adam / AdamW with global-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteError


@dataclass
class OptimizerState:
    kind: str = "adam"  # "adam" | "adamw"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict, clip_norm: float | None) -> tuple[dict, float]:
    """Scale all grads by clip_norm / ||g|| when ||g|| > clip_norm. Returns (grads, pre-clip norm)."""
    norm = global_norm(grads)
    if clip_norm is None or clip_norm <= 0 or norm <= clip_norm:
        return grads, norm
    scale = clip_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


def optimizer_apply(state: OptimizerState, params: dict, grads: dict,
                    clip_norm: float | None = None) -> dict:
    """One clipped Adam/AdamW step. Returns new params; advances ``state`` in place.

    Raises NonFiniteError before touching anything if a gradient is NaN/inf.
    """
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {params[k].shape} for {k!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {k!r}")
    grads, _ = clip_by_global_norm(grads, clip_norm)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    out = {}
    for k, p in params.items():
        g = grads[k]
        if state.kind == "adam" and state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1 - state.beta1) * g if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = (1 - state.beta2) * g * g if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        new = p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.kind == "adamw" and state.weight_decay:
            new = new - state.lr * state.weight_decay * p
        out[k] = new
    return out
