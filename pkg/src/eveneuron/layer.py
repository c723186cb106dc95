"""The EVE layer: N neurons, each with a k-dimensional diagonal Gaussian latent.

Every neuron owns affine mean and log-variance heads on the shared input ``h``;
the layer output is a 1/sqrt(N)-normalised linear readout of the N*k latent
means (or samples).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkernel import Rng

PARAM_NAMES = ("A_mu", "b_mu", "A_logvar", "b_logvar", "w", "b0")
CHECKPOINT_VERSION = 1


@dataclass
class LayerConfig:
    N: int = 8
    k: int = 1
    d: int = 1
    readout_source: str = "means"  # "means" | "samples"
    sigma_floor: float = 1e-4
    mc_samples: int = 1

    def __post_init__(self):
        if self.N < 1 or self.k < 1 or self.d < 1:
            raise ValueError(f"N, k, d must be >= 1 (got N={self.N}, k={self.k}, d={self.d})")
        if self.sigma_floor < 0:
            raise ValueError("sigma_floor must be >= 0")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if self.readout_source not in ("means", "samples"):
            raise ValueError(f"readout_source must be 'means' or 'samples', got {self.readout_source!r}")

    @property
    def logvar_floor(self) -> float:
        return 2.0 * np.log(self.sigma_floor) if self.sigma_floor > 0 else -np.inf


@dataclass
class EveLayerParams:
    A_mu: np.ndarray
    b_mu: np.ndarray
    A_logvar: np.ndarray
    b_logvar: np.ndarray
    w: np.ndarray
    b0: np.ndarray = field(default_factory=lambda: np.zeros(()))

    @property
    def N(self) -> int:
        return self.A_mu.shape[0]

    @property
    def k(self) -> int:
        return self.A_mu.shape[1]

    @property
    def d(self) -> int:
        return self.A_mu.shape[2]

    def as_dict(self) -> dict:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "EveLayerParams":
        p = cls(**{name: np.array(d[name], dtype=np.float64) for name in PARAM_NAMES})
        p.validate()
        return p

    def copy(self) -> "EveLayerParams":
        return EveLayerParams(**{n: a.copy() for n, a in self.as_dict().items()})

    def validate(self, cfg: LayerConfig | None = None):
        N, k, d = self.A_mu.shape
        want = {"A_mu": (N, k, d), "b_mu": (N, k), "A_logvar": (N, k, d),
                "b_logvar": (N, k), "w": (N * k,), "b0": ()}
        for name, shape in want.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        if cfg is not None and (N, k, d) != (cfg.N, cfg.k, cfg.d):
            raise ValueError(f"params are (N,k,d)={(N, k, d)}, config wants {(cfg.N, cfg.k, cfg.d)}")


def init_params(cfg: LayerConfig, rng: Rng) -> EveLayerParams:
    """Heads ~ N(0, 1/d), b_mu = 0, b_logvar = -2, w ~ N(0, 1/(N k)), b0 = 0."""
    N, k, d = cfg.N, cfg.k, cfg.d
    return EveLayerParams(
        A_mu=rng.normal((N, k, d)) / np.sqrt(d),
        b_mu=np.zeros((N, k)),
        A_logvar=rng.normal((N, k, d)) / np.sqrt(d),
        b_logvar=np.full((N, k), -2.0),
        w=rng.normal(N * k) / np.sqrt(N * k),
        b0=np.zeros(()),
    )


def posterior(params: EveLayerParams, h: np.ndarray, sigma_floor: float = 0.0):
    """Per-neuron affine heads -> (mu, logvar), each batch x N x k."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != params.d:
        raise ValueError(f"h must be (batch, {params.d}), got {h.shape}")
    mu = np.einsum("nkd,bd->bnk", params.A_mu, h) + params.b_mu
    logvar = np.einsum("nkd,bd->bnk", params.A_logvar, h) + params.b_logvar
    if sigma_floor > 0:
        logvar = np.maximum(logvar, 2.0 * np.log(sigma_floor))
    return mu, logvar


def reparameterize(mu: np.ndarray, logvar: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """z = mu + exp(logvar / 2) * eps."""
    if mu.shape != logvar.shape or eps.shape[-mu.ndim:] != mu.shape:
        raise ValueError("mu, logvar and eps shapes disagree")
    return mu + np.exp(0.5 * logvar) * eps


def kl_diag(mu: np.ndarray, logvar: np.ndarray):
    """KL(q || N(0, I)) per (row, neuron), summed over the k latent coordinates.

    Returns ``(per_row, per_neuron)`` where ``per_neuron`` is the batch mean.
    """
    if mu.shape != logvar.shape:
        raise ValueError("mu and logvar shapes disagree")
    per_row = 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=-1)
    return per_row, per_row.mean(axis=0)


def kl_mean(per_neuron_kl) -> float:
    per_neuron_kl = np.asarray(per_neuron_kl, dtype=np.float64)
    if per_neuron_kl.size == 0:
        raise ValueError("kl_mean of an empty neuron set")
    return float(per_neuron_kl.mean())


def readout(m: np.ndarray, w: np.ndarray, b0, N: int) -> np.ndarray:
    """y_hat = w . m / sqrt(N) + b0 for each row of m (batch x N*k)."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != w.shape[0]:
        raise ValueError(f"m must be (batch, {w.shape[0]}), got {m.shape}")
    return m @ w / np.sqrt(N) + float(b0)


@dataclass
class ForwardTrace:
    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray
    y_hat: np.ndarray
    per_neuron_kl: np.ndarray
    kl_mean: float


def forward(params: EveLayerParams, h: np.ndarray, rng: Rng | None, cfg: LayerConfig,
            mode: str = "stochastic", eps: np.ndarray | None = None) -> ForwardTrace:
    """posterior -> sample (or means) -> readout.

    ``eps`` (mc_samples x batch x N x k) overrides drawing from ``rng``. With
    several Monte Carlo samples, ``y_hat`` is their average and ``z`` holds the
    first draw.
    """
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown mode {mode!r}")
    mu, logvar = posterior(params, h, cfg.sigma_floor)
    B, N, k = mu.shape
    _, per_neuron = kl_diag(mu, logvar)
    if mode == "deterministic":
        z = mu.copy()
        y_hat = readout(mu.reshape(B, N * k), params.w, params.b0, N)
    else:
        if eps is None:
            eps = rng.normal((cfg.mc_samples, B, N, k))
        eps = eps.reshape((-1, B, N, k))
        zs = reparameterize(mu, logvar, eps)
        z = zs[0]
        src = mu[None] if cfg.readout_source == "means" else zs
        y_hat = np.mean([readout(s.reshape(B, N * k), params.w, params.b0, N) for s in src], axis=0)
    return ForwardTrace(mu=mu, logvar=logvar, z=z, y_hat=y_hat,
                        per_neuron_kl=per_neuron, kl_mean=kl_mean(per_neuron))


def save_checkpoint(path, params: EveLayerParams):
    """Write params as an uncompressed ``.npz``; see README for the layout."""
    np.savez(Path(path), format_version=np.array(CHECKPOINT_VERSION), **params.as_dict())


def load_checkpoint(path) -> EveLayerParams:
    with np.load(Path(path)) as f:
        version = int(f["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        return EveLayerParams.from_dict({n: f[n] for n in PARAM_NAMES})
