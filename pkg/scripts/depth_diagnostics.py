"""Depth diagnostics and timestep probes for freshly trained toy models.

    python3 scripts/depth_diagnostics.py --out runs/diag [--steps 2000] [--seeds 0 1 2]

For each (variant, seed) trains a model, saves its checkpoint next to the
CSV/SVG report, and prints the per-seed profile summary: share of monotone
forward-RMS block pairs, shallowest vs deepest gradient RMS, and shallow vs
deep median cosine similarity of adjacent block states.
"""
import argparse
import os

import numpy as np

from darlab.checkpoint import save_checkpoint
from darlab.diagnostics import diagnose, make_diag_batch, write_report
from darlab.router import RouterConfig
from darlab.train import TrainConfig, train

VARIANTS = {
    "standard": RouterConfig("standard"),
    "dar-static": RouterConfig("dar", "static", 4),
    "dar-dynamic": RouterConfig("dar", "dynamic", 4),
}


def summarize(rep) -> str:
    fwd, grad, cos = rep.rms_fwd, rep.rms_grad, rep.cos_sim
    half = len(cos) // 2
    line = (f"monotone fwd {np.mean(np.diff(fwd) >= 0):.0%}  grad {grad[0]:.3e} -> {grad[-1]:.3e}  "
            f"cos shallow {np.median(cos[:half]):.3f} deep {np.median(cos[-half:]):.3f}")
    if rep.probe is not None:
        p = rep.probe
        line += f"  probe x_t {p.baseline_r2:.3f} min depth {p.r2.min():.3f}"
    return line


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/diag")
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--samples", type=int, default=512)
    ap.add_argument("--t", type=float, default=1.0, help="timestep of the depth profiles")
    ap.add_argument("--probe-pairs", type=int, default=256)
    args = ap.parse_args(argv)

    for variant in args.variants:
        for seed in args.seeds:
            cfg = TrainConfig(router=VARIANTS[variant], steps=args.steps, seed=seed)
            res = train(cfg)
            out = os.path.join(args.out, variant, f"seed{seed}")
            os.makedirs(out, exist_ok=True)
            save_checkpoint(os.path.join(out, "final.darl"), res, cfg)
            batch = make_diag_batch(seed, args.samples, cfg.model.n_classes)
            rep = diagnose(res.model, batch, t=args.t, probe_pairs=args.probe_pairs,
                           checkpoint_id=f"{variant}/seed{seed}")
            write_report(out, rep, svg=True)
            print(f"{variant:12s} seed {seed}: {summarize(rep)}")


if __name__ == "__main__":
    main()
