"""Structured sweeps over (k, regime, AR) and run-set analysis."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import replace
from itertools import product
from pathlib import Path

import numpy as np

from .config import RunSpec, build_dataset, resolve_layer
from .data import Dataset
from .diagnostics import RunRecord, analyze_records
from .numkernel import derive_seed
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

TABLE_COLUMNS = (
    "k", "regime", "ar", "n", "n_aborted",
    "best_val_mse_mean", "best_val_mse_std", "best_score_mean", "best_score_std",
    "inside_mass_mean", "inside_mass_std", "frac_high_mean", "frac_high_std",
    "kl_mean", "kl_std", "kl_median", "out_mean", "out_std",
    "test_mse_mean", "test_mse_std", "ar_share_mean", "ar_share_std",
)


def cell_seed(base_seed: int, k: int, regime: str, ar: bool, index: int) -> int:
    """Run seed for one sweep cell: blake2b-64 of 'base|k|regime|ar|index' reprs."""
    return derive_seed(int(base_seed), int(k), str(regime), bool(ar), int(index))


def cell_name(k: int, regime: str, ar: bool) -> str:
    return f"k{k}_{regime}_ar{'on' if ar else 'off'}"


def cell_config(train: TrainConfig, spec: RunSpec, d: int, k: int, regime: str, ar: bool) -> TrainConfig:
    base = resolve_layer(spec, d, k=k)
    return replace(base, control=replace(train.control, regime=regime),
                   ar=replace(train.ar, enabled=bool(ar)))


def _job(args):
    cfg, ds, seed, metrics_path = args
    return fit(cfg, ds, seed, metrics_path)


def _stats(vals):
    v = np.asarray(vals, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def summarize_cell(k, regime, ar, records: list) -> dict:
    done = [r for r in records if r.completed]
    row = {"k": k, "regime": regime, "ar": bool(ar), "n": len(done),
           "n_aborted": len(records) - len(done)}
    series = {
        "best_val_mse": [r.val_mse for r in done],
        "best_score": [r.selection_score for r in done],
        "inside_mass": [r.epochs[-1].inside_mass for r in done],
        "frac_high": [r.epochs[-1].frac_high for r in done],
        "out": [r.final_out for r in done],
        "test_mse": [r.test_mse for r in done],
        "ar_share": [r.epochs[-1].ar_share for r in done],
    }
    for name, vals in series.items():
        row[f"{name}_mean"], row[f"{name}_std"] = _stats(vals)
    row["kl_mean"], row["kl_std"] = _stats([r.final_kl for r in done])
    row["kl_median"] = float(np.median([r.final_kl for r in done])) if done else float("nan")
    return row


def run_sweep(spec: RunSpec, out_dir, workers: int = 1, ds: Dataset | None = None,
              ar_flags=None) -> list:
    """Run every (k, regime, ar) cell for every sweep seed; write the table.

    Each cell gets its own subdirectory with per-seed records and metrics; the
    table is written as ``sweep.csv`` and ``sweep.jsonl`` at the root.
    """
    sw = spec.sweep
    if sw is None:
        raise ValueError("config has no [sweep] section")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ds = ds if ds is not None else build_dataset(spec.data)
    flags = sw.ar_flags if ar_flags is None else ar_flags
    cells = list(product(sw.k_values, sw.regimes, flags))
    jobs, owners = [], []
    for k, regime, ar in cells:
        cdir = out_dir / cell_name(k, regime, ar)
        cdir.mkdir(exist_ok=True)
        cfg = cell_config(spec.train, spec, ds.d, k, regime, ar)
        for i, _ in enumerate(sw.seeds):
            seed = cell_seed(sw.base_seed, k, regime, ar, i)
            jobs.append((cfg, ds, seed, cdir / f"seed{i}.metrics.jsonl"))
            owners.append((k, regime, ar, i))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_job, jobs))
    else:
        records = [_job(j) for j in jobs]
    rows = []
    for k, regime, ar in cells:
        recs = []
        for (ok, oreg, oar, i), rec in zip(owners, records):
            if (ok, oreg, oar) == (k, regime, ar):
                rec.save(out_dir / cell_name(k, regime, ar) / f"seed{i}.record.json")
                recs.append(rec)
                if rec.aborted:
                    log.warning("cell %s seed %d aborted: %s", cell_name(k, regime, ar), i, rec.abort_reason)
        rows.append(summarize_cell(k, regime, ar, recs))
    write_table(rows, out_dir)
    return rows


def write_table(rows: list, out_dir):
    out_dir = Path(out_dir)
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TABLE_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({c: repr(r[c]) if isinstance(r[c], float) else r[c] for c in TABLE_COLUMNS})
    with open(out_dir / "sweep.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_table(path) -> list:
    """Parse ``sweep.csv`` back into typed rows."""
    rows = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            row = {}
            for c, v in r.items():
                if c == "regime":
                    row[c] = v
                elif c == "ar":
                    row[c] = v == "True"
                elif c in ("k", "n", "n_aborted"):
                    row[c] = int(v)
                else:
                    row[c] = float(v)
            rows.append(row)
    return rows


def load_records(records_dir) -> tuple[list, list]:
    paths = sorted(Path(records_dir).rglob("*.record.json"))
    return [RunRecord.load(p) for p in paths], [str(p.relative_to(records_dir)) for p in paths]


def analyze_dir(records_dir, out_dir=None) -> dict:
    """Out-vs-normalised-test-MSE correlation over every record under a directory.

    Writes ``analysis.json`` and ``scatter.csv`` into ``out_dir`` (default:
    the records directory).
    """
    records, labels = load_records(records_dir)
    result = analyze_records(records, labels)
    out_dir = Path(out_dir or records_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"r": result.r, "p": result.p, "n": result.n, "datasets": result.datasets,
              "normalization": "per-dataset z-score of test MSE"}
    (out_dir / "analysis.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    with open(out_dir / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "dataset", "out", "test_mse", "test_mse_z"])
        for row in result.rows:
            w.writerow([row[0], row[1]] + [repr(x) for x in row[2:]])
    return report
