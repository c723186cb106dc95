"""Capacity-band control: latent energy, soft band penalty, hard projection,
free-bits KL and the homeostatic KL-weight controller."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layer import EveLayerParams

REGIMES = ("homeo", "projOFF", "projON")


@dataclass
class ControlConfig:
    ell: float = 0.5
    u: float = 2.0
    lambda_band: float = 1.0
    regime: str = "projOFF"
    tau_free: float | None = None  # None -> 0.1 * k
    beta: float = 0.01
    eta: float = 0.05
    beta_min: float = 1e-4
    beta_max: float = 10.0
    band_scope: str = "neuron"  # "neuron" | "layer"
    kl_eff_in_loss: bool = False
    projection_cadence: str = "step"  # "step" | "epoch"
    projection_stat: str = "batch"  # "batch" | "ema"
    ema_decay: float = 0.9

    def __post_init__(self):
        if not 0 <= self.ell < self.u:
            raise ValueError(f"band needs 0 <= ell < u, got [{self.ell}, {self.u}]")
        if self.lambda_band < 0 or self.beta < 0:
            raise ValueError("lambda_band and beta must be >= 0")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.regime == "homeo" and not self.beta_min <= self.beta <= self.beta_max:
            raise ValueError("homeo regime needs beta_min <= beta <= beta_max")
        if self.band_scope not in ("neuron", "layer"):
            raise ValueError(f"band_scope must be 'neuron' or 'layer', got {self.band_scope!r}")
        if self.projection_cadence not in ("step", "epoch"):
            raise ValueError("projection_cadence must be 'step' or 'epoch'")
        if self.projection_stat not in ("batch", "ema"):
            raise ValueError("projection_stat must be 'batch' or 'ema'")

    def tau_for(self, k: int) -> float:
        return 0.1 * k if self.tau_free is None else self.tau_free


@dataclass
class ProjectionReport:
    scale: np.ndarray  # one factor per neuron (or a single entry at layer scope)
    energy_before: np.ndarray
    energy_after: np.ndarray
    events: int = 0  # neurons (or layers) actually rescaled
    degenerate: int = 0  # zero-energy units below the band, left alone

    @property
    def mean_abs_correction(self) -> float:
        moved = self.scale != 1.0
        return float(np.mean(np.abs(1.0 - self.scale[moved]))) if moved.any() else 0.0


def latent_energy(mu: np.ndarray):
    """(mu2_bar, per-neuron energy) with energy_i = mean_batch ||mu_i||^2 / k."""
    if mu.ndim != 3 or mu.shape[0] == 0:
        raise ValueError("latent_energy needs a non-empty batch x N x k array")
    k = mu.shape[2]
    per_neuron = np.sum(mu * mu, axis=(0, 2)) / (mu.shape[0] * k)
    return float(per_neuron.mean()), per_neuron


def band_penalty(energy, ell: float, u: float):
    """(ell - E)_+^2 + (E - u)_+^2; elementwise on arrays."""
    lo = np.maximum(ell - np.asarray(energy, dtype=np.float64), 0.0)
    hi = np.maximum(np.asarray(energy, dtype=np.float64) - u, 0.0)
    out = lo * lo + hi * hi
    return float(out) if out.ndim == 0 else out


def projection_scale(energy, ell: float, u: float):
    """Multiplicative factor that moves energy onto the violated bound.

    Returns (scale, degenerate_mask). Zero energy below a positive ``ell``
    cannot be rescaled; its factor stays 1 and it is flagged.
    """
    e = np.atleast_1d(np.asarray(energy, dtype=np.float64))
    s = np.ones_like(e)
    degenerate = (e <= 0.0) & (ell > 0)
    low = (e < ell) & ~degenerate
    high = e > u
    s[low] = np.sqrt(ell / e[low])
    s[high] = np.sqrt(u / e[high])
    return s, degenerate


def project_mean_head(params: EveLayerParams, energy, ell: float, u: float):
    """Rescale (A_mu, b_mu) so the reference-batch energy lands in [ell, u].

    ``energy`` is either the per-neuron vector (each neuron gets its own
    factor) or the scalar layer statistic (one factor for every neuron).
    Energy is quadratic in the mean head, so the scaled energy equals
    s**2 * energy exactly.
    """
    e = np.atleast_1d(np.asarray(energy, dtype=np.float64))
    if e.size not in (1, params.N):
        raise ValueError(f"energy must be scalar or length {params.N}")
    s, degenerate = projection_scale(e, ell, u)
    out = params.copy()
    factor = s if e.size == params.N else np.full(params.N, s[0])
    out.A_mu = params.A_mu * factor[:, None, None]
    out.b_mu = params.b_mu * factor[:, None]
    report = ProjectionReport(scale=s, energy_before=e, energy_after=e * s * s,
                              events=int(np.sum(s != 1.0)), degenerate=int(degenerate.sum()))
    return out, report


def kl_eff(kl, tau_free: float):
    """Free-bits hinge max(kl - tau, 0); elementwise on arrays."""
    out = np.maximum(np.asarray(kl, dtype=np.float64) - tau_free, 0.0)
    return float(out) if out.ndim == 0 else out


def homeo_step(beta: float, mu2_bar: float, cfg: ControlConfig) -> float:
    """beta * exp(eta * [(E - u)_+ - (ell - E)_+]), clamped to [beta_min, beta_max].

    Energy above the band raises KL pressure, energy below lowers it.
    """
    drive = max(mu2_bar - cfg.u, 0.0) - max(cfg.ell - mu2_bar, 0.0)
    return float(np.clip(beta * np.exp(cfg.eta * drive), cfg.beta_min, cfg.beta_max))
