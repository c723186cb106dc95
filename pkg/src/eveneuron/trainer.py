"""Objective assembly, the guarded optimisation loop, model selection and
multi-seed aggregation."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _accel
from .control import ControlConfig, band_penalty, homeo_step, kl_eff, latent_energy, project_mean_head
from .data import Dataset
from .diagnostics import (EpochDiagnostics, RunRecord, band_occupancy, collapse_fraction, drift,
                          reparam_proxy, selection_score)
from .kernels import loss_and_grad, make_settings
from .layer import (EveLayerParams, ForwardTrace, LayerConfig, forward, init_params, posterior,
                    save_checkpoint)
from .numkernel import NonFiniteError, OptimizerState, Rng, global_norm, optimizer_apply
from .temporal import ARConfig, ar_penalty, ar_share

log = logging.getLogger(__name__)

# relative slack when checking energies that projection placed on a bound
PROJECTION_RTOL = 1e-6
KERNEL_NAMES = ("A_mu", "b_mu", "A_logvar", "b_logvar", "w", "b0")


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class TrainConfig:
    layer: LayerConfig = field(default_factory=LayerConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    ar: ARConfig = field(default_factory=ARConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 20
    batch_size: int = 32
    clip_norm: float = 5.0
    seeds: list = field(default_factory=lambda: [0])
    w_out: float = 0.5
    w_kl: float = 0.0
    eps_collapse: float = 0.01
    drift_window: int = 10
    deterministic: bool = False  # train without sampling (z = mu)
    init_mu_scale: float = 1.0  # multiplies the initial mean head
    pred_samples: int = 128

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    task: float
    kl: float
    band: float
    ar: float

    @property
    def total(self) -> float:
        return self.task + self.kl + self.band + self.ar

    @classmethod
    def from_parts(cls, parts, beta: float, lambda_band: float, alpha_ar: float) -> "LossBreakdown":
        task, kl, band, ar = (float(p) for p in parts)
        return cls(task=task, kl=beta * kl, band=lambda_band * band, ar=alpha_ar * ar)

    def check_finite(self):
        for name in ("task", "kl", "band", "ar"):
            if not np.isfinite(getattr(self, name)):
                raise NonFiniteError(f"non-finite {name} loss")


def total_loss(trace: ForwardTrace, targets: np.ndarray, control: ControlConfig, ar: ARConfig,
               beta: float | None = None, seq_len: int = 1) -> LossBreakdown:
    """Weighted objective evaluated directly on a forward trace.

    Rows of the trace are grouped into consecutive sequences of ``seq_len``
    for the AR term; ``seq_len`` < 2 (or AR disabled) drops it.
    """
    beta = control.beta if beta is None else beta
    resid = trace.y_hat - np.asarray(targets).reshape(-1)
    task = float(np.mean(resid ** 2))
    k = trace.mu.shape[2]
    if control.kl_eff_in_loss:
        kl = float(np.mean(kl_eff(trace.per_neuron_kl, control.tau_for(k))))
    else:
        kl = trace.kl_mean
    mu2_bar, energy = latent_energy(trace.mu)
    if control.band_scope == "neuron":
        band = float(np.mean(band_penalty(energy, control.ell, control.u)))
    else:
        band = band_penalty(mu2_bar, control.ell, control.u)
    ar_val = 0.0
    if ar.enabled and seq_len >= 2:
        R, N, _ = trace.mu.shape
        ar_val = ar_penalty(trace.mu.reshape(R // seq_len, seq_len, N, k), ar.phi)
    out = LossBreakdown.from_parts((task, kl, band, ar_val), beta, control.lambda_band, ar.weight)
    out.check_finite()
    return out


@dataclass
class TrainState:
    params: EveLayerParams
    opt: OptimizerState
    rng: Rng
    beta: float
    ema_energy: np.ndarray | None = None


@dataclass
class StepResult:
    loss: LossBreakdown
    grad_norm: float
    projection: object = None  # ProjectionReport when a projection ran
    energy: np.ndarray | None = None  # per-neuron batch energy after the step


def _flatten(h: np.ndarray, y: np.ndarray):
    if h.ndim == 3:
        B, T, d = h.shape
        return h.reshape(B * T, d), y.reshape(B * T), T
    return h, y.reshape(-1), 1


def _kernel_settings(cfg: TrainConfig, beta: float) -> np.ndarray:
    c, a, l = cfg.control, cfg.ar, cfg.layer
    return make_settings(beta=beta, tau_free=c.tau_for(l.k), use_kl_eff=c.kl_eff_in_loss,
                         lambda_band=c.lambda_band, ell=c.ell, u=c.u,
                         band_per_neuron=c.band_scope == "neuron", alpha_ar=a.weight, phi=a.phi,
                         logvar_floor=l.logvar_floor, stochastic=not cfg.deterministic,
                         sample_readout=l.readout_source == "samples")


def batch_loss_and_grad(params: EveLayerParams, h, y, eps, cfg: TrainConfig, beta: float):
    """Weighted LossBreakdown and parameter gradients for one batch."""
    hf, yf, T = _flatten(np.asarray(h, dtype=np.float64), np.asarray(y, dtype=np.float64))
    parts, grads = loss_and_grad(params.A_mu, params.b_mu, params.A_logvar, params.b_logvar,
                                 params.w, params.b0, hf, eps, yf, T, _kernel_settings(cfg, beta))
    loss = LossBreakdown.from_parts(parts, beta, cfg.control.lambda_band, cfg.ar.weight)
    return loss, dict(zip(KERNEL_NAMES, grads))


def batch_energy(params: EveLayerParams, h: np.ndarray, sigma_floor: float) -> np.ndarray:
    hf = h.reshape(-1, h.shape[-1])
    mu, _ = posterior(params, hf, sigma_floor)
    return latent_energy(mu)[1]


def apply_projection(state: TrainState, energy: np.ndarray, cfg: TrainConfig):
    c = cfg.control
    ref = energy if c.band_scope == "neuron" else float(energy.mean())
    params, report = project_mean_head(state.params, ref, c.ell, c.u)
    state.params = params
    return report


def train_step(state: TrainState, h: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> StepResult:
    """Stochastic forward, weighted loss, clipped optimiser step, optional projection.

    On a non-finite loss or gradient, raises NonFiniteError and leaves
    ``state.params`` unchanged.
    """
    l = cfg.layer
    h = np.asarray(h, dtype=np.float64)
    rows = h.shape[0] * (h.shape[1] if h.ndim == 3 else 1)
    if cfg.deterministic:
        eps = np.zeros((1, rows, l.N, l.k))
    else:
        eps = state.rng.normal((l.mc_samples, rows, l.N, l.k))
    loss, grads = batch_loss_and_grad(state.params, h, y, eps, cfg, state.beta)
    loss.check_finite()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    gnorm = global_norm(grads)
    new = optimizer_apply(state.opt, state.params.as_dict(), grads, cfg.clip_norm)
    state.params = EveLayerParams(**new)

    report = None
    energy = batch_energy(state.params, h, l.sigma_floor)
    c = cfg.control
    if c.regime == "projON" and c.projection_cadence == "step":
        ref = energy
        if c.projection_stat == "ema":
            state.ema_energy = energy if state.ema_energy is None else (
                c.ema_decay * state.ema_energy + (1 - c.ema_decay) * energy)
            ref = state.ema_energy
        report = apply_projection(state, ref, cfg)
        energy = batch_energy(state.params, h, l.sigma_floor)
    return StepResult(loss=loss, grad_norm=gnorm, projection=report, energy=energy)


def _rows(X, y):
    if X.ndim == 3:
        B, T, d = X.shape
        return X.reshape(B * T, d), y.reshape(B * T), T
    return X, y.reshape(-1), 1


def evaluate_point(params: EveLayerParams, X, y, cfg: LayerConfig) -> tuple[float, float]:
    """(MSE, MAE) of the deterministic (posterior-mean) prediction."""
    hf, yf, _ = _rows(X, y)
    trace = forward(params, hf, None, cfg, mode="deterministic")
    r = trace.y_hat - yf
    return float(np.mean(r * r)), float(np.mean(np.abs(r)))


def predictive_samples(params: EveLayerParams, h: np.ndarray, rng: Rng, cfg: LayerConfig,
                       n_samples: int) -> np.ndarray:
    """n_samples x rows predictions from the readout of sampled latents.

    Draws one sample at a time so memory stays at rows x N x k.
    """
    mu, logvar = posterior(params, h, cfg.sigma_floor)
    B, N, k = mu.shape
    sigma = np.exp(0.5 * logvar)
    out = np.empty((n_samples, B))
    for s in range(n_samples):
        z = mu + sigma * rng.normal((B, N, k))
        out[s] = z.reshape(B, N * k) @ params.w / np.sqrt(N) + float(params.b0)
    return out


def crps_samples(samples: np.ndarray, y: np.ndarray) -> float:
    """Sample CRPS: E|X - y| - 0.5 E|X - X'|, averaged over rows."""
    S = samples.shape[0]
    term1 = np.mean(np.abs(samples - y[None]), axis=0)
    xs = np.sort(samples, axis=0)
    coef = (2 * np.arange(1, S + 1) - S - 1)[:, None]
    term2 = np.sum(coef * xs, axis=0) / (S * S)  # = 0.5 E|X - X'|
    return float(np.mean(term1 - term2))


def pinball_samples(samples: np.ndarray, y: np.ndarray, quantiles=(0.1, 0.5, 0.9)) -> float:
    losses = []
    for q in quantiles:
        pred = np.quantile(samples, q, axis=0)
        diff = y - pred
        losses.append(np.mean(np.maximum(q * diff, (q - 1) * diff)))
    return float(np.mean(losses))


def epoch_diagnostics(epoch: int, params: EveLayerParams, X, y, cfg: TrainConfig, beta: float,
                      rng: Rng, mu2_history: list) -> EpochDiagnostics:
    """Validation-set diagnostics of the current parameters."""
    l, c = cfg.layer, cfg.control
    hf, yf, T = _rows(X, y)
    trace = forward(params, hf, rng, l, mode="stochastic")
    det = forward(params, hf, None, l, mode="deterministic")
    val_mse = float(np.mean((det.y_hat - yf) ** 2))
    mu2_bar, energy = latent_energy(trace.mu)
    mu2_history.append(mu2_bar)
    fl, fh, inside, out = band_occupancy(energy, c.ell, c.u)
    tau = c.tau_for(l.k)
    kle = float(np.mean(kl_eff(trace.per_neuron_kl, tau)))
    arp = 0.0
    if T >= 2:
        R, N, k = trace.mu.shape
        arp = ar_penalty(trace.mu.reshape(R // T, T, N, k), cfg.ar.phi)
    return EpochDiagnostics(
        epoch=epoch, val_mse=val_mse, kl_mean=trace.kl_mean, kl_eff=kle, mu2_bar=mu2_bar,
        energy_min=float(energy.min()), energy_median=float(np.median(energy)),
        energy_max=float(energy.max()), frac_low=fl, frac_high=fh, inside_mass=inside, out=out,
        reparam_proxy=reparam_proxy(trace.z, trace.mu, l.k),
        collapse_fraction=collapse_fraction(trace.per_neuron_kl, cfg.eps_collapse),
        drift=drift(mu2_history, cfg.drift_window), ar_penalty=arp, beta=beta,
        selection_score=selection_score(val_mse, out, kle, cfg.w_out, cfg.w_kl))


def _check_dims(cfg: TrainConfig, ds: Dataset):
    if ds.d != cfg.layer.d:
        raise ValueError(f"dataset has d={ds.d} features, layer expects d={cfg.layer.d}")
    if ds.train_idx.size == 0 or ds.val_idx.size == 0:
        raise ValueError("dataset needs non-empty train and val splits")


def init_state(cfg: TrainConfig, seed: int) -> TrainState:
    root = Rng(seed)
    params = init_params(cfg.layer, root.derive("init"))
    if cfg.init_mu_scale != 1.0:
        params.A_mu *= cfg.init_mu_scale
        params.b_mu *= cfg.init_mu_scale
    o = cfg.optim
    opt = OptimizerState(kind=o.kind, lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                         weight_decay=o.weight_decay)
    return TrainState(params=params, opt=opt, rng=root.derive("train"), beta=cfg.control.beta)


def fit(cfg: TrainConfig, ds: Dataset, seed: int, metrics_path=None,
        checkpoint_path=None) -> RunRecord:
    """Train one run; select the best epoch by score; evaluate it on test."""
    _check_dims(cfg, ds)
    state = init_state(cfg, seed)
    eval_rng = Rng(seed).derive("eval")
    snapshot = dict(cfg.to_dict(), backend=_accel.BACKEND)
    record = RunRecord(config=snapshot, seed=int(seed), dataset=ds.name)
    Xtr, ytr = ds.split("train")
    Xva, yva = ds.split("val")
    n = Xtr.shape[0]
    best_score, best_params = np.inf, state.params.copy()
    mu2_history: list = []
    stream = open(metrics_path, "w") if metrics_path else None
    try:
        for epoch in range(cfg.epochs):
            perm = state.rng.permutation(n)
            sums = np.zeros(4)
            gnorms, events, degenerate, corrections = [], 0, 0, []
            last_energy = None
            try:
                for start in range(0, n, cfg.batch_size):
                    idx = perm[start:start + cfg.batch_size]
                    res = train_step(state, Xtr[idx], ytr[idx], cfg)
                    sums += np.array([res.loss.task, res.loss.kl, res.loss.band, res.loss.ar]) * idx.size
                    gnorms.append(res.grad_norm)
                    last_energy = res.energy
                    if res.projection is not None:
                        events += res.projection.events
                        degenerate += res.projection.degenerate
                        if res.projection.events:
                            corrections.append(res.projection.mean_abs_correction)
                c = cfg.control
                if c.regime == "projON" and c.projection_cadence == "epoch":
                    rep = apply_projection(state, last_energy, cfg)
                    events, degenerate = rep.events, rep.degenerate
                    corrections = [rep.mean_abs_correction] if rep.events else []
                    last_energy = batch_energy(state.params, Xtr[idx], cfg.layer.sigma_floor)
            except NonFiniteError as exc:
                record.aborted = True
                record.abort_reason = f"epoch {epoch}: {exc}"
                log.warning("run aborted: %s", record.abort_reason)
                break

            mean_loss = LossBreakdown(*(sums / n))
            diag = epoch_diagnostics(epoch, state.params, Xva, yva, cfg, state.beta, eval_rng,
                                     mu2_history)
            diag.train_loss = mean_loss.total
            diag.train_task = mean_loss.task
            diag.ar_share = ar_share(mean_loss)[0]
            diag.grad_norm = float(np.mean(gnorms))
            diag.projection_events = events
            diag.projection_degenerate = degenerate
            diag.projection_mean_abs_correction = float(np.mean(corrections)) if corrections else 0.0
            diag.last_batch_out = band_occupancy(last_energy, cfg.control.ell, cfg.control.u,
                                                 PROJECTION_RTOL)[3]
            record.epochs.append(diag)
            if stream:
                stream.write(json.dumps(dict(kind="epoch", **diag.to_dict()), sort_keys=True) + "\n")
                if cfg.control.regime == "projON":
                    stream.write(json.dumps({"kind": "projection", "epoch": epoch, "events": events,
                                             "degenerate": degenerate,
                                             "mean_abs_correction": diag.projection_mean_abs_correction},
                                            sort_keys=True) + "\n")
                stream.flush()
            if diag.selection_score < best_score:
                best_score = diag.selection_score
                best_params = state.params.copy()
                record.best_epoch = epoch
            if cfg.control.regime == "homeo":
                state.beta = homeo_step(state.beta, diag.mu2_bar, cfg.control)
    finally:
        if stream:
            stream.close()

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, best_params)
    if record.aborted or not record.epochs:
        return record
    best = record.epochs[record.best_epoch]
    record.val_mse = best.val_mse
    record.selection_score = best.selection_score
    last = record.epochs[-1]
    record.final_out = last.out
    record.final_kl = last.kl_mean
    if ds.test_idx.size:
        Xte, yte = ds.split("test")
        record.test_mse, record.test_mae = evaluate_point(best_params, Xte, yte, cfg.layer)
        hf, yf, _ = _rows(Xte, yte)
        samples = predictive_samples(best_params, hf, eval_rng, cfg.layer, cfg.pred_samples)
        record.test_crps = crps_samples(samples, yf)
        record.test_pinball = pinball_samples(samples, yf)
    return record


AGG_METRICS = ("val_mse", "test_mse", "test_mae", "test_crps", "test_pinball", "selection_score",
               "final_out", "final_kl")


def aggregate(records: list) -> dict:
    """Mean and sample std (n - 1) per metric over completed runs."""
    done = [r for r in records if r.completed]
    if not done:
        raise RuntimeError("every run aborted: " + "; ".join(r.abort_reason for r in records))
    out = {"n": len(done), "single_seed": len(done) == 1,
           "aborted": [{"seed": r.seed, "reason": r.abort_reason} for r in records if not r.completed]}
    per_epoch = {
        "inside_mass": lambda r: r.epochs[-1].inside_mass,
        "frac_high": lambda r: r.epochs[-1].frac_high,
        "ar_share": lambda r: r.epochs[-1].ar_share,
    }
    getters = {m: (lambda r, m=m: getattr(r, m)) for m in AGG_METRICS}
    getters.update(per_epoch)
    for name, get in getters.items():
        vals = np.array([get(r) for r in done], dtype=np.float64)
        out[name] = {"mean": float(vals.mean()),
                     "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
    return out


def _fit_job(args):
    cfg, ds, seed, metrics_path = args
    return fit(cfg, ds, seed, metrics_path)


def multi_seed(cfg: TrainConfig, ds: Dataset, out_dir=None, workers: int = 1):
    """Run every seed in ``cfg.seeds``; returns (records, aggregate report)."""
    jobs = []
    for seed in cfg.seeds:
        mp = Path(out_dir) / f"seed{seed}.metrics.jsonl" if out_dir else None
        jobs.append((cfg, ds, seed, mp))
    if workers > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_fit_job, jobs))
    else:
        records = [_fit_job(j) for j in jobs]
    if out_dir:
        for rec in records:
            rec.save(Path(out_dir) / f"seed{rec.seed}.record.json")
    return records, aggregate(records)
