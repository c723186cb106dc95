"""Command-line entry point: ``eve {train,sweep,ablate,analyze,gradcheck}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, build_dataset, load_config, resolve_layer

log = logging.getLogger("eveneuron")


def cmd_train(args) -> int:
    spec = load_config(args.config)
    ds = build_dataset(spec.data)
    cfg = resolve_layer(spec, ds.d)
    if args.seed is not None:
        from dataclasses import replace
        cfg = replace(cfg, seeds=[args.seed])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds.write_manifest(out / "dataset.json")
    from .trainer import multi_seed
    try:
        records, report = multi_seed(cfg, ds, out, workers=args.workers or 1)
    except RuntimeError as exc:
        log.error("%s", exc)
        return 1
    (out / "aggregate.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    log.info("train: %d/%d runs completed, test MSE %.4f +/- %.4f -> %s", report["n"], len(records),
             report["test_mse"]["mean"], report["test_mse"]["std"], out)
    return 0


def _sweep(args, ar_flags=None) -> int:
    from .sweep import run_sweep
    spec = load_config(args.config)
    if spec.sweep is None:
        raise ConfigError(f"{args.config}: a [sweep] section is required")
    if args.seed is not None:
        from dataclasses import replace
        spec.sweep = replace(spec.sweep, base_seed=args.seed)
    rows = run_sweep(spec, args.out_dir, workers=args.workers or os.cpu_count() or 1,
                     ar_flags=ar_flags)
    for r in rows:
        log.info("k=%-3d %-8s ar=%-5s val %.4f  score %.4f  inside %.3f  high %.3f  KL %.3f",
                 r["k"], r["regime"], r["ar"], r["best_val_mse_mean"], r["best_score_mean"],
                 r["inside_mass_mean"], r["frac_high_mean"], r["kl_mean"])
    return 0


def cmd_sweep(args) -> int:
    return _sweep(args)


def cmd_ablate(args) -> int:
    return _sweep(args, ar_flags=[False, True])


def cmd_analyze(args) -> int:
    from .sweep import analyze_dir
    try:
        report = analyze_dir(args.records_dir, args.out_dir)
    except ValueError as exc:
        log.error("analyze: %s", exc)
        return 1
    print(f"r = {report['r']:.4f}  p = {report['p']:.3g}  n = {report['n']}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import COMPONENTS, run_gradcheck
    t0 = time.perf_counter()
    passed, results, worst = run_gradcheck(args.trials, args.tolerance, args.seed or 0)
    for i, r in enumerate(results):
        if r.worst() > args.tolerance:
            print(f"trial {i}: FAIL (max rel error {r.worst():.3e})")
    for c in COMPONENTS:
        print(f"{c:5s} max relative error {worst[c]:.3e}")
    print(f"{'PASS' if passed else 'FAIL'}: {args.trials} trials at tolerance {args.tolerance:g} "
          f"in {time.perf_counter() - t0:.2f}s")
    if args.out_dir:
        Path(args.out_dir).mkdir(parents=True, exist_ok=True)
        (Path(args.out_dir) / "gradcheck.json").write_text(json.dumps(
            {"passed": passed, "tolerance": args.tolerance, "trials": args.trials, "worst": worst},
            indent=1, sort_keys=True) + "\n")
    return 0 if passed else 1


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eve", description="EVE variational-neuron experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="INI config file")
        sp.add_argument("--out-dir", default=None if not config else "runs")
        sp.add_argument("--workers", type=_positive_int, default=None)
        sp.add_argument("--seed", type=int, default=None)

    common(sub.add_parser("train", help="train one configuration over its seeds"))
    common(sub.add_parser("sweep", help="grid over k x regime x AR"))
    common(sub.add_parser("ablate", help="sweep with AR both off and on"))
    an = sub.add_parser("analyze", help="out vs test-MSE correlation over saved run records")
    an.add_argument("records_dir")
    common(an, config=False)
    gc = sub.add_parser("gradcheck", help="check analytic gradients against finite differences")
    gc.add_argument("--trials", type=_positive_int, default=20)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    common(gc, config=False)
    return p


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "ablate": cmd_ablate,
            "analyze": cmd_analyze, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
