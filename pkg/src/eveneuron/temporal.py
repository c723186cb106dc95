"""Neuron-level autoregressive persistence of the latent means."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class ARConfig:
    enabled: bool = False
    tau_time: float = 1.0
    dt: float = 1.0
    alpha_ar: float = 0.0
    sigma_ar: float = 1.0  # innovation scale of the explicit prior; unused by the penalty

    def __post_init__(self):
        if self.tau_time <= 0:
            raise ValueError("tau_time must be > 0")
        if self.dt < 0 or self.alpha_ar < 0:
            raise ValueError("dt and alpha_ar must be >= 0")

    @property
    def phi(self) -> float:
        return ar_coefficient(self.dt, self.tau_time)

    @property
    def weight(self) -> float:
        return self.alpha_ar if self.enabled else 0.0


def ar_coefficient(dt: float, tau_time: float) -> float:
    if tau_time <= 0:
        raise ValueError("tau_time must be > 0")
    if dt < 0:
        raise ValueError("dt must be >= 0")
    return math.exp(-dt / tau_time)


def ar_penalty(mu_seq: np.ndarray, phi: float, short_ok: bool = False) -> float:
    """Mean over steps t >= 2 of ||mu_t - phi mu_{t-1}||^2.

    ``mu_seq`` is T x N x k, or batch x T x N x k (batch averaged). The norm
    runs over every neuron-latent coordinate.
    """
    mu_seq = np.asarray(mu_seq, dtype=np.float64)
    if mu_seq.ndim == 3:
        mu_seq = mu_seq[None]
    T = mu_seq.shape[1]
    if T < 2:
        if short_ok:
            return 0.0
        raise ValueError(f"ar_penalty needs at least 2 steps, got {T}")
    diff = mu_seq[:, 1:] - phi * mu_seq[:, :-1]
    return float(np.sum(diff * diff) / (mu_seq.shape[0] * (T - 1)))


def ar_share(loss) -> tuple[float, bool]:
    """Fraction of ``loss.total`` carried by the weighted AR term ``loss.ar``.

    Returns ``(share, ok)``; ``ok`` is False (and share 0) when the total is
    not positive.
    """
    if loss.total <= 0:
        return 0.0, False
    return loss.ar / loss.total, True
