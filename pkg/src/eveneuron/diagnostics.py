"""Neuron-level observability: band occupancy, sampling noise, collapse and
drift indicators, run records, and the cross-run out-vs-MSE correlation."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np


@dataclass
class EpochDiagnostics:
    epoch: int
    train_loss: float = 0.0
    train_task: float = 0.0
    val_mse: float = 0.0
    kl_mean: float = 0.0
    kl_eff: float = 0.0
    mu2_bar: float = 0.0
    energy_min: float = 0.0
    energy_median: float = 0.0
    energy_max: float = 0.0
    frac_low: float = 0.0
    frac_high: float = 0.0
    inside_mass: float = 1.0
    out: float = 0.0
    reparam_proxy: float = 0.0
    collapse_fraction: float = 0.0
    drift: float = 0.0
    ar_penalty: float = 0.0
    ar_share: float = 0.0
    beta: float = 0.0
    grad_norm: float = 0.0
    projection_events: int = 0
    projection_degenerate: int = 0
    projection_mean_abs_correction: float = 0.0
    last_batch_out: float = 0.0
    selection_score: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    config: dict
    seed: int
    dataset: str = "data"
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    val_mse: float | None = None
    test_mse: float | None = None
    test_mae: float | None = None
    test_crps: float | None = None
    test_pinball: float | None = None
    selection_score: float | None = None
    final_out: float | None = None
    final_kl: float | None = None
    aborted: bool = False
    abort_reason: str = ""

    @property
    def completed(self) -> bool:
        return not self.aborted and self.test_mse is not None

    def to_json(self) -> str:
        d = asdict(self)
        d["epochs"] = [e.to_dict() if isinstance(e, EpochDiagnostics) else e for e in self.epochs]
        return json.dumps(d, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        d = json.loads(text)
        names = {f.name for f in fields(EpochDiagnostics)}
        d["epochs"] = [EpochDiagnostics(**{k: v for k, v in e.items() if k in names})
                       for e in d.get("epochs", [])]
        return cls(**d)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_json(Path(path).read_text())


def band_occupancy(per_neuron_energy, ell: float, u: float, rtol: float = 0.0):
    """(frac_low, frac_high, inside_mass, out); boundary values count as inside.

    ``rtol`` widens the band to [ell*(1-rtol), u*(1+rtol)] so that energies
    placed on a bound by projection are not flagged by rounding.
    """
    e = np.asarray(per_neuron_energy, dtype=np.float64)
    n = e.size
    if n == 0:
        raise ValueError("band_occupancy needs at least one neuron")
    n_low = int(np.sum(e < ell * (1.0 - rtol)))
    n_high = int(np.sum(e > u * (1.0 + rtol)))
    n_in = n - n_low - n_high
    return n_low / n, n_high / n, n_in / n, (n_low + n_high) / n


def reparam_proxy(z: np.ndarray, mu: np.ndarray, k: int) -> float:
    """Mean over batch and neurons of ||z - mu||_1 / k."""
    if z.shape != mu.shape:
        raise ValueError("z and mu shapes disagree")
    return float(np.mean(np.sum(np.abs(z - mu), axis=-1)) / k)


def collapse_fraction(per_neuron_kl, eps_collapse: float = 0.01) -> float:
    if eps_collapse <= 0:
        raise ValueError("eps_collapse must be > 0")
    kl = np.asarray(per_neuron_kl, dtype=np.float64)
    return float(np.mean(kl < eps_collapse))


def drift(mu2_history, window: int = 10) -> float:
    """|current - mean(previous `window` values)| / (that mean + 1e-8)."""
    hist = np.asarray(mu2_history, dtype=np.float64)
    if hist.size < 2:
        return 0.0
    ref = hist[:-1][-window:].mean()
    return float(abs(hist[-1] - ref) / (ref + 1e-8))


def selection_score(val_mse: float, out: float, kl_eff: float,
                    w_out: float = 0.5, w_kl: float = 0.0) -> float:
    """val_mse * (1 + w_out * out + w_kl * kl_eff / (kl_eff + 1)); lower is better."""
    if w_out < 0 or w_kl < 0:
        raise ValueError("selection weights must be >= 0")
    kl_norm = kl_eff / (kl_eff + 1.0)
    return val_mse * (1.0 + w_out * out + w_kl * kl_norm)


# --- Student t tail via the regularised incomplete beta function -------------

def _betacf(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    """Continued fraction for I_x(a, b), evaluated with the modified Lentz method."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise RuntimeError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(0.5 * df, 0.5, df / (df + t * t))


def pearson(xs, ys) -> tuple[float, float]:
    """Sample Pearson r and its two-sided p-value (t test, n - 2 dof)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d sequences of equal length")
    n = x.size
    if n < 3:
        raise ValueError(f"pearson needs at least 3 points, got {n}")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("pearson is undefined for a constant input (zero variance)")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    if abs(r) == 1.0:
        return r, 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return r, student_t_two_sided(t, n - 2)


def zscore_within(values, groups) -> np.ndarray:
    """Standardise ``values`` separately inside each group label (population std)."""
    values = np.asarray(values, dtype=np.float64)
    groups = np.asarray(groups)
    out = np.empty_like(values)
    for g in np.unique(groups):
        m = groups == g
        v = values[m]
        sd = v.std()
        out[m] = (v - v.mean()) / (sd if sd > 0 else 1.0)
    return out


@dataclass
class OutMseAnalysis:
    r: float
    p: float
    n: int
    datasets: list
    rows: list  # (run label, dataset, out, test_mse, normalised test_mse)


def analyze_records(records: list, labels: list | None = None) -> OutMseAnalysis:
    """Pool completed runs: per-dataset z-scored test MSE against final ``out``."""
    done = [(i, r) for i, r in enumerate(records) if r.completed and r.final_out is not None]
    if len(done) < 3:
        raise ValueError(f"need at least 3 completed runs, got {len(done)}")
    outs = np.array([r.final_out for _, r in done])
    mses = np.array([r.test_mse for _, r in done])
    groups = [r.dataset for _, r in done]
    z = zscore_within(mses, groups)
    r, p = pearson(outs, z)
    names = labels or [f"run{i}" for i in range(len(records))]
    rows = [(names[i], rec.dataset, float(o), float(m), float(zz))
            for (i, rec), o, m, zz in zip(done, outs, mses, z)]
    return OutMseAnalysis(r=r, p=p, n=len(done), datasets=sorted(set(groups)), rows=rows)
