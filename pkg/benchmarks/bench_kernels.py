#!/usr/bin/env python3
"""Compare the numba and pure-numpy paths of the hot kernels.

Times the fused loss/gradient kernel and the Gaussian sampler on a few
problem sizes, checks that both paths agree, and optionally times a short
end-to-end fit under each value of EVENEURON_BACKEND.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--fit] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from eveneuron import _accel
from eveneuron.kernels import loss_and_grad_loops, loss_and_grad_numpy, make_settings
from eveneuron.numkernel.rng import normals_numba, normals_numpy

SIZES = [  # (rows, N, k, d)
    (32, 8, 1, 8),
    (64, 16, 4, 16),
    (256, 32, 8, 32),
]

FIT_SNIPPET = """
import time
from eveneuron.data import synth_tabular, tabular_dataset
from eveneuron.layer import LayerConfig
from eveneuron.numkernel import Rng
from eveneuron.trainer import TrainConfig, fit
X, y, _ = synth_tabular(Rng(0), 1024, 16)
ds = tabular_dataset(X, y, rng=Rng(1))
cfg = TrainConfig(layer=LayerConfig(N=16, k=4, d=16), epochs=5, batch_size=64, pred_samples=16)
fit(cfg, ds, 0)  # warm-up (jit compile or cache load)
t0 = time.perf_counter()
fit(cfg, ds, 1)
print(time.perf_counter() - t0)
"""


def best_of(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_case(rows, N, k, d, seed=0):
    r = np.random.default_rng(seed)
    args = (r.normal(size=(N, k, d)), r.normal(size=(N, k)), 0.3 * r.normal(size=(N, k, d)),
            0.3 * r.normal(size=(N, k)), r.normal(size=N * k), 0.1, r.normal(size=(rows, d)),
            r.normal(size=(1, rows, N, k)), r.normal(size=rows), 4)
    s = make_settings(beta=0.01, lambda_band=1.0, alpha_ar=0.5, phi=0.8, logvar_floor=-18.4,
                      sample_readout=True)
    return args + (s,)


def bench_kernels(repeat):
    out = []
    for rows, N, k, d in SIZES:
        args = kernel_case(rows, N, k, d)
        pa, ga = loss_and_grad_numpy(*args)
        pb, gb = loss_and_grad_loops(*args)
        err = max(float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) for a, b in zip(ga, gb))
        t_np = best_of(lambda: loss_and_grad_numpy(*args), repeat)
        t_nb = best_of(lambda: loss_and_grad_loops(*args), repeat)
        out.append({"case": f"loss_and_grad R={rows} N={N} k={k} d={d}", "numpy_s": t_np,
                    "numba_s": t_nb, "max_abs_diff": err})
    for n in (10_000, 1_000_000):
        a, b = normals_numpy(7, 0, n), normals_numba(7, 0, n)
        err = float(np.max(np.abs(a - b)))
        t_np = best_of(lambda: normals_numpy(7, 0, n), repeat)
        t_nb = best_of(lambda: normals_numba(7, 0, n), repeat)
        out.append({"case": f"normals n={n}", "numpy_s": t_np, "numba_s": t_nb, "max_abs_diff": err})
    return out


def bench_fit():
    out = {}
    for backend in ("numpy", "numba"):
        env = dict(os.environ, EVENEURON_BACKEND=backend)
        res = subprocess.run([sys.executable, "-c", FIT_SNIPPET], env=env, capture_output=True,
                             text=True, check=True)
        out[backend] = float(res.stdout.strip().splitlines()[-1])
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--fit", action="store_true", help="also time a short fit under each backend")
    ap.add_argument("--json", default=None, help="write results to this file")
    args = ap.parse_args(argv)

    if not _accel.HAVE_NUMBA:
        print("numba unavailable (or EVENEURON_BACKEND=numpy): both columns time the numpy path")
    rows = bench_kernels(args.repeat)
    print(f"{'case':42s} {'numpy ms':>10s} {'numba ms':>10s} {'speedup':>8s} {'max diff':>9s}")
    for r in rows:
        print(f"{r['case']:42s} {1e3 * r['numpy_s']:10.3f} {1e3 * r['numba_s']:10.3f} "
              f"{r['numpy_s'] / r['numba_s']:8.2f} {r['max_abs_diff']:9.1e}")
    result = {"kernels": rows}
    if args.fit:
        result["fit_seconds"] = bench_fit()
        f = result["fit_seconds"]
        print(f"fit (5 epochs, N=16 k=4 d=16): numpy {f['numpy']:.2f}s  numba {f['numba']:.2f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=1)


if __name__ == "__main__":
    main()
