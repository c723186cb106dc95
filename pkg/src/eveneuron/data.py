"""Dataset ingestion, standardisation, windowing and synthetic generators."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numkernel import Rng

STD_FLOOR = 1e-8


@dataclass
class Dataset:
    """Features and targets with disjoint train/val/test row indices.

    Tabular: ``X`` is rows x d, ``y`` rows. Sequence: ``X`` is windows x T x d
    and ``y`` windows x T (per-step next-value targets).
    """
    X: np.ndarray
    y: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray
    name: str = "data"
    columns: tuple = ()
    x_mean: np.ndarray | None = None
    x_std: np.ndarray | None = None
    y_mean: float = 0.0
    y_std: float = 1.0

    def __post_init__(self):
        n = self.X.shape[0]
        idx = np.concatenate([self.train_idx, self.val_idx, self.test_idx])
        if idx.size != n or not np.array_equal(np.sort(idx), np.arange(n)):
            raise ValueError("splits must be disjoint and cover every row")

    @property
    def is_sequence(self) -> bool:
        return self.X.ndim == 3

    @property
    def d(self) -> int:
        return self.X.shape[-1]

    def split(self, which: str):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        return self.X[idx], self.y[idx]

    def inverse_targets(self, y) -> np.ndarray:
        return np.asarray(y) * self.y_std + self.y_mean

    def manifest(self) -> dict:
        return {
            "name": self.name,
            "kind": "sequence" if self.is_sequence else "tabular",
            "columns": list(self.columns),
            "shape": list(self.X.shape),
            "splits": {"train": int(self.train_idx.size), "val": int(self.val_idx.size),
                       "test": int(self.test_idx.size)},
            "x_mean": None if self.x_mean is None else self.x_mean.tolist(),
            "x_std": None if self.x_std is None else self.x_std.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }

    def write_manifest(self, path):
        Path(path).write_text(json.dumps(self.manifest(), indent=1, sort_keys=True) + "\n")


def split_indices(n: int, fractions=(0.7, 0.15, 0.15), rng: Rng | None = None):
    """Chronological split, or shuffled when ``rng`` is given."""
    if n < 3:
        raise ValueError(f"need at least 3 rows to split, got {n}")
    order = np.arange(n) if rng is None else rng.permutation(n)
    n_train = max(1, int(round(fractions[0] * n)))
    n_val = max(1, int(round(fractions[1] * n)))
    n_train = min(n_train, n - 2)
    n_val = min(n_val, n - n_train - 1)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def load_csv(path, target_columns=None, header: bool = True):
    """Read a numeric CSV into (features, targets, feature names, target names).

    ``target_columns`` holds names (with a header) or 0-based indices; the last
    column is the target by default. Errors name the 1-based file line and
    column of the offending cell.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such CSV file: {path}")
    with path.open(newline="") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if not rows:
        raise ValueError(f"{path} is empty")
    names = None
    if header:
        names = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
        if not rows:
            raise ValueError(f"{path} has a header but no data rows")
    width = len(rows[0][1]) if names is None else len(names)
    data = np.empty((len(rows), width))
    for r, (line, cells) in enumerate(rows):
        if len(cells) != width:
            raise ValueError(f"{path}: line {line} has {len(cells)} cells, expected {width}")
        for c, cell in enumerate(cells):
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: non-numeric cell {cell!r} at (row {line}, column {c + 1})") from None
    names = names or [f"c{i}" for i in range(width)]
    if target_columns is None:
        tcols = [width - 1]
    else:
        tcols = []
        for t in ([target_columns] if isinstance(target_columns, (str, int)) else target_columns):
            if isinstance(t, int) or (isinstance(t, str) and t.isdigit() and t not in names):
                tcols.append(int(t))
            elif t in names:
                tcols.append(names.index(t))
            else:
                raise ValueError(f"unknown target column {t!r}")
    fcols = [i for i in range(width) if i not in tcols]
    y = data[:, tcols[0]] if len(tcols) == 1 else data[:, tcols]
    return data[:, fcols], y, [names[i] for i in fcols], [names[i] for i in tcols]


def tabular_dataset(X, y, rng: Rng | None = None, name="data", columns=(), fractions=(0.7, 0.15, 0.15)):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tr, va, te = split_indices(X.shape[0], fractions, rng)
    return Dataset(X=X, y=y, train_idx=tr, val_idx=va, test_idx=te, name=name, columns=tuple(columns))


def standardize(ds: Dataset) -> Dataset:
    """Z-score features and targets with train-split statistics (std floored)."""
    Xtr = ds.X[ds.train_idx].reshape(-1, ds.d)
    ytr = ds.y[ds.train_idx].reshape(-1)
    if Xtr.shape[0] == 0:
        raise ValueError("standardize needs a non-empty train split")
    xm, xs = Xtr.mean(axis=0), np.maximum(Xtr.std(axis=0), STD_FLOOR)
    ym, ys = float(ytr.mean()), float(max(ytr.std(), STD_FLOOR))
    return replace(ds, X=(ds.X - xm) / xs, y=(ds.y - ym) / ys, x_mean=xm, x_std=xs,
                   y_mean=ym, y_std=ys)


def window_starts(T: int, L: int, H: int, stride: int = 1) -> np.ndarray:
    if L < 1 or H < 1 or stride < 1:
        raise ValueError("window length, horizon and stride must be >= 1")
    if T < L + H:
        raise ValueError(f"series of length {T} is shorter than L + H = {L + H}")
    return np.arange(0, T - L - H + 1, stride)


def make_windows(series, L: int, H: int, stride: int = 1):
    """Inputs x[t:t+L] and horizon targets x[t+L:t+L+H] at each start t.

    Returns arrays (n, L, d) and (n, H, d); n = floor((T - L - H) / stride) + 1.
    """
    s = np.asarray(series, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    starts = window_starts(s.shape[0], L, H, stride)
    X = np.stack([s[t:t + L] for t in starts])
    Y = np.stack([s[t + L:t + L + H] for t in starts])
    return X, Y


def sequence_windows(features, targets, L: int, stride: int = 1):
    """Length-L input windows with per-step next-value targets.

    Window starting at t holds features[t:t+L] and targets[t+1:t+L+1]; the
    window count equals that of :func:`make_windows` with H = 1.
    """
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        f = f[:, None]
    tgt = np.asarray(targets, dtype=np.float64)
    starts = window_starts(f.shape[0], L, 1, stride)
    X = np.stack([f[t:t + L] for t in starts])
    y = np.stack([tgt[t + 1:t + L + 1] for t in starts])
    return X, y


def series_dataset(values, target_col: int = -1, L: int = 24, stride: int = 1, lags: int = 1,
                   name="series", columns=(), fractions=(0.7, 0.15, 0.15)) -> Dataset:
    """Chronological sequence dataset from a T x d series.

    The series is split chronologically first, then each segment is windowed,
    so no window straddles two splits. With ``lags`` > 1 every step sees the
    last ``lags`` values of each column.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim == 1:
        v = v[:, None]
    target = v[:, target_col]
    if lags > 1:
        T = v.shape[0]
        v = np.concatenate([v[lags - 1 - j:T - j] for j in range(lags)], axis=1)
        target = target[lags - 1:]
    T = v.shape[0]
    bounds = np.cumsum([int(round(fr * T)) for fr in fractions[:2]])
    segs = [(0, bounds[0]), (bounds[0], bounds[1]), (bounds[1], T)]
    Xs, ys, counts = [], [], []
    for a, b in segs:
        X, y = sequence_windows(v[a:b], target[a:b], L, stride)
        Xs.append(X)
        ys.append(y)
        counts.append(X.shape[0])
    c = np.cumsum([0] + counts)
    return Dataset(X=np.concatenate(Xs), y=np.concatenate(ys),
                   train_idx=np.arange(c[0], c[1]), val_idx=np.arange(c[1], c[2]),
                   test_idx=np.arange(c[2], c[3]), name=name, columns=tuple(columns))


def true_weights(d: int) -> np.ndarray:
    """Fixed generator weights w*_j = (-1)^j / sqrt(j + 1)."""
    j = np.arange(d)
    return np.where(j % 2 == 0, 1.0, -1.0) / np.sqrt(j + 1.0)


TRUE_BIAS = 0.5


def synth_tabular(rng: Rng, n: int, d: int, noise_kind: str = "homoscedastic",
                  noise: float = 0.1):
    """x ~ N(0, I_d), y = w*.x + 0.5 + eps.

    Homoscedastic: eps ~ noise * N(0, 1). Heteroscedastic: the noise scale is
    multiplied by ||x|| / sqrt(d). Returns (X, y, eps).
    """
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    if noise_kind not in ("homoscedastic", "heteroscedastic"):
        raise ValueError(f"unknown noise kind {noise_kind!r}")
    X = rng.normal((n, d))
    eps = noise * rng.normal(n)
    if noise_kind == "heteroscedastic":
        eps = eps * np.linalg.norm(X, axis=1) / np.sqrt(d)
    return X, X @ true_weights(d) + TRUE_BIAS + eps, eps


def synth_ar_sequence(rng: Rng, T: int, phi_true: float, noise: float = 1.0,
                      s0: float | None = None):
    """s_t = phi s_{t-1} + noise * N(0, 1); returns (series, next-step targets).

    ``s0`` defaults to a draw from the stationary law. ``targets[t] = s[t+1]``.
    """
    if abs(phi_true) >= 1:
        raise ValueError("|phi_true| must be < 1")
    innov = noise * rng.normal(T)
    s = np.empty(T)
    if s0 is None:
        s0 = innov[0] / np.sqrt(1.0 - phi_true ** 2)
    s[0] = s0
    for t in range(1, T):
        s[t] = phi_true * s[t - 1] + innov[t]
    return s, s[1:].copy()
