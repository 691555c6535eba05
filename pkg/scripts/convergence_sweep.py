"""Validation MSE and MMD against training steps for several routing variants.

    python3 scripts/convergence_sweep.py scripts/sweep.cfg --out runs/sweep

Writes curves.csv (variant, seed, step, val_mse, mmd), summary.csv with the
median steps each variant needs to reach the standard baseline's final
validation MSE, and median-over-seeds SVG curves.
"""
import argparse
import csv
import os
import sys
import time

import numpy as np

from darlab.config import build_train_config, read_config_file
from darlab.plots import line_plot
from darlab.router import RouterConfig
from darlab.train import evaluate, heldout_set, make_valset, train

SWEEP_KEYS = ("variants", "seeds", "mmd_every", "mmd_samples")


def router_for(variant: str, chunk_size: int, pooling: str) -> RouterConfig:
    if variant in ("standard", "unet_skip"):
        return RouterConfig(variant)
    query = {"dar-static": "static", "dar-explicit": "explicit_t", "dar-dynamic": "dynamic"}.get(variant)
    if query is None:
        raise SystemExit(f"unknown variant {variant!r}")
    return RouterConfig("dar", query, chunk_size, pooling)


def steps_to_reach(curve, target):
    return next((s for s, v in curve if v <= target), float("inf"))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("sweep_file")
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--steps", type=int, help="override the sweep file's step count")
    args = ap.parse_args(argv)

    items = read_config_file(args.sweep_file)
    variants = [v.strip() for v in items.get("variants", "standard").split(",")]
    seeds = [int(s) for s in items.get("seeds", "0").split(",")]
    mmd_every, mmd_n = int(items.get("mmd_every", 0)), int(items.get("mmd_samples", 256))
    base = {k: v for k, v in items.items() if k not in SWEEP_KEYS}
    if args.steps is not None:
        base["steps"] = str(args.steps)
    template = build_train_config(base)
    os.makedirs(args.out, exist_ok=True)

    val, mmd = {}, {}
    for variant in variants:
        rc = router_for(variant, template.router.chunk_size, template.router.pooling)
        for seed in seeds:
            cfg = build_train_config({**base, "seed": str(seed), "mode": rc.mode,
                                      "query_variant": rc.query_variant})
            held = heldout_set(seed, mmd_n, cfg.model.n_classes)
            vs = make_valset(seed, min(cfg.n_val, mmd_n), cfg.model.n_classes)
            points = []

            def measure(res, _loss):
                if mmd_every and res.step % mmd_every == 0:
                    points.append((res.step, evaluate(res.model, held, vs, n=mmd_n, seed=seed).mmd))

            t0 = time.perf_counter()
            res = train(cfg, measure)
            val[variant, seed], mmd[variant, seed] = res.val_curve, points
            print(f"{variant:13s} seed {seed}: final val {res.val_curve[-1][1]:.4f} "
                  f"({time.perf_counter() - t0:.0f} s)", file=sys.stderr)

    with open(os.path.join(args.out, "curves.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "seed", "step", "val_mse", "mmd"])
        for (variant, seed), curve in val.items():
            m = dict(mmd[variant, seed])
            for step, v in curve:
                w.writerow([variant, seed, step, f"{v:.8g}", f"{m[step]:.8g}" if step in m else ""])

    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "median_final_val", "median_steps_to_baseline", "ratio"])
        for variant in variants:
            finals = [val[variant, s][-1][1] for s in seeds]
            row = [variant, f"{np.median(finals):.6g}", "", ""]
            if "standard" in variants:
                reach = [steps_to_reach(val[variant, s], val["standard", s][-1][1]) for s in seeds]
                med = float(np.median(reach))
                row[2:] = [f"{med:g}", f"{med / template.steps:.3f}"]
            w.writerow(row)
            print(",".join(row))

    for name, data in (("val_mse", val), ("mmd", mmd)):
        series = {}
        for variant in variants:
            curves = [data[variant, s] for s in seeds if data[variant, s]]
            if curves:
                n = min(len(c) for c in curves)
                steps = [s for s, _ in curves[0][:n]]
                series[variant] = (steps, np.median([[v for _, v in c[:n]] for c in curves], axis=0).tolist())
        if series:
            line_plot(os.path.join(args.out, f"{name}.svg"), series, "step", name, logy=True)


if __name__ == "__main__":
    main()
