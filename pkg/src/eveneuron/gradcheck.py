"""Gradient verification of the full objective on random small instances.

Three routes are compared per component (task, KL, band, AR):

* the fused kernel used for training (numba or numpy backend),
* the reverse-mode tape applied to an independent expression of the loss,
* central finite differences of the plain-numpy objective
  (``layer.forward`` + ``trainer.total_loss``), the reference.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import ControlConfig
from .layer import EveLayerParams, LayerConfig, forward
from .numkernel import Rng, fd_gradient, grad, max_relative_error
from .numkernel import autodiff as ad
from .temporal import ARConfig
from .trainer import KERNEL_NAMES, TrainConfig, batch_loss_and_grad, total_loss

COMPONENTS = ("task", "kl", "band", "ar")


@dataclass
class Instance:
    cfg: TrainConfig
    params: EveLayerParams
    h: np.ndarray  # batch x T x d
    y: np.ndarray  # batch x T
    eps: np.ndarray  # 1 x rows x N x k


def random_instance(rng: Rng) -> Instance:
    """N <= 4, k in {1,2,3}, d <= 5, batch <= 6, every loss term active."""
    u = rng.uniform(8)
    N = 1 + int(u[0] * 4)
    k = 1 + int(u[1] * 3)
    d = 1 + int(u[2] * 5)
    B = 1 + int(u[3] * 3)
    T = 2 + int(u[4] * 2)  # B * T <= 6 rows of 2..3 steps
    B = max(1, min(B, 6 // T))
    sample_readout = u[5] < 0.5
    params = EveLayerParams(
        A_mu=rng.normal((N, k, d)), b_mu=0.5 * rng.normal((N, k)),
        A_logvar=0.4 * rng.normal((N, k, d)), b_logvar=0.4 * rng.normal((N, k)),
        w=rng.normal(N * k), b0=np.array(0.3 * rng.normal(1)[0]))
    h = rng.normal((B, T, d))
    y = rng.normal((B, T))
    eps = rng.normal((1, B * T, N, k))
    # a band that the instance's energies straddle, so both hinges can fire
    mu = np.einsum("nkd,bd->bnk", params.A_mu, h.reshape(-1, d)) + params.b_mu
    energy = np.sum(mu * mu, axis=(0, 2)) / (B * T * k)
    mid = float(np.median(energy))
    cfg = TrainConfig(
        layer=LayerConfig(N=N, k=k, d=d, readout_source="samples" if sample_readout else "means",
                          sigma_floor=1e-4),
        control=ControlConfig(ell=0.8 * mid + 0.05 * u[6], u=1.2 * mid + 0.1, lambda_band=1.0 + u[7],
                              beta=0.5, regime="projOFF"),
        ar=ARConfig(enabled=True, tau_time=2.0, dt=1.0, alpha_ar=0.7),
    )
    return Instance(cfg=cfg, params=params, h=h, y=y, eps=eps)


def _isolate(cfg: TrainConfig, component: str) -> TrainConfig:
    from dataclasses import replace
    c = replace(cfg.control, beta=cfg.control.beta if component == "kl" else 0.0,
                lambda_band=cfg.control.lambda_band if component == "band" else 0.0)
    a = replace(cfg.ar, alpha_ar=cfg.ar.alpha_ar if component == "ar" else 0.0)
    return replace(cfg, control=c, ar=a)


def reference_loss(inst: Instance, cfg: TrainConfig, params: dict) -> float:
    p = EveLayerParams(**params)
    B, T, d = inst.h.shape
    trace = forward(p, inst.h.reshape(B * T, d), None, cfg.layer, mode="stochastic", eps=inst.eps)
    return total_loss(trace, inst.y, cfg.control, cfg.ar, seq_len=T).total


def tape_loss(inst: Instance, cfg: TrainConfig, P: dict):
    """Same objective written with tape operations only."""
    B, T, d = inst.h.shape
    R = B * T
    N, k = cfg.layer.N, cfg.layer.k
    h = inst.h.reshape(R, d)
    mu = ad.einsum("nkd,rd->rnk", P["A_mu"], h) + P["b_mu"]
    raw = ad.einsum("nkd,rd->rnk", P["A_logvar"], h) + P["b_logvar"]
    floor = cfg.layer.logvar_floor
    lv = ad.relu(raw - floor) + floor
    if cfg.layer.readout_source == "samples":
        m = mu + ad.exp(lv * 0.5) * inst.eps[0]
    else:
        m = mu
    y_hat = ad.einsum("rj,j->r", m.reshape(R, N * k), P["w"]) * (1.0 / np.sqrt(N)) + P["b0"]
    task = ad.mean(ad.square(y_hat - inst.y.reshape(R)))
    kl = ad.mean(ad.sum_(ad.square(mu) + ad.exp(lv) - lv - 1.0, axis=2) * 0.5)
    c = cfg.control
    energy = ad.sum_(ad.square(mu), axis=(0, 2)) * (1.0 / (R * k))
    band = ad.mean(ad.square(ad.relu(c.ell - energy)) + ad.square(ad.relu(energy - c.u)))
    seq = mu.reshape(B, T, N, k)
    diff = seq[:, 1:] - seq[:, :-1] * cfg.ar.phi
    arp = ad.sum_(ad.square(diff)) * (1.0 / (B * (T - 1)))
    return task + kl * c.beta + band * c.lambda_band + arp * cfg.ar.weight


@dataclass
class TrialResult:
    kernel_error: dict = field(default_factory=dict)  # component -> max rel error vs fd
    tape_error: dict = field(default_factory=dict)

    def worst(self) -> float:
        return max(list(self.kernel_error.values()) + list(self.tape_error.values()))


def check_instance(inst: Instance, step: float = 1e-5) -> TrialResult:
    res = TrialResult()
    base = inst.params.as_dict()
    for comp in COMPONENTS:
        cfg = _isolate(inst.cfg, comp)
        ref = fd_gradient(lambda p: reference_loss(inst, cfg, p), base, step)
        _, kgrads = batch_loss_and_grad(inst.params, inst.h, inst.y, inst.eps, cfg, cfg.control.beta)
        tgrads = grad(lambda P: tape_loss(inst, cfg, P), base)
        res.kernel_error[comp] = max_relative_error(kgrads, ref)
        res.tape_error[comp] = max_relative_error(tgrads, ref)
    return res


def run_gradcheck(trials: int = 20, tolerance: float = 1e-4, seed: int = 0):
    """Returns (passed, per-trial results, per-component worst error)."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = Rng(seed)
    results = [check_instance(random_instance(rng.derive("trial", t))) for t in range(trials)]
    worst = {c: max(max(r.kernel_error[c], r.tape_error[c]) for r in results) for c in COMPONENTS}
    passed = all(r.worst() <= tolerance for r in results)
    return passed, results, worst
