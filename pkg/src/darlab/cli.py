"""Command-line entry point: ``darlab <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys

import numpy as np

from . import __version__
from .backbone import ModelConfig
from .config import build_train_config, config_items, known_keys, read_config_file
from .router import RouterConfig
from .errors import DarlabError

COMMANDS = ("train", "sample", "evaluate", "diagnose", "probe", "cost-model", "bench-agg")


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _model_router_keys() -> list[str]:
    return [f.name for cls in (ModelConfig, RouterConfig) for f in dataclasses.fields(cls)]


def _add_config_flags(p: argparse.ArgumentParser, keys: list[str]) -> None:
    p.add_argument("--config", help="key = value file; flags override its values")
    g = p.add_argument_group("config keys")
    for k in keys:
        g.add_argument(_flag(k), dest=f"cfg_{k}", metavar="V", default=None)


def _resolve_items(args) -> dict[str, str]:
    items = read_config_file(args.config) if args.config else {}
    for k in known_keys():
        v = getattr(args, f"cfg_{k}", None)
        if v is not None:
            items[k] = str(v)
    return items


def _write_manifest(out_dir: str, command: str, resolved: dict, extra: dict | None = None) -> str:
    os.makedirs(out_dir, exist_ok=True)
    doc = {"command": command, "version": __version__,
           "python": platform.python_version(), "numpy": np.__version__, "config": resolved}
    if extra:
        doc.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=False)
    return path


def _load_model(args):
    """Checkpoint model; with --config the checkpoint must match its model/router keys."""
    from .checkpoint import load_checkpoint
    expect = None
    if getattr(args, "config", None):
        cfg = build_train_config(_resolve_items(args))
        expect = (cfg.model, cfg.router)
    ckpt = load_checkpoint(args.checkpoint, expect)
    return ckpt, ckpt.model()


# -- commands ---------------------------------------------------------------------
def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .train import train

    items = _resolve_items(args)
    if args.out:
        items["out_dir"] = args.out
    cfg = build_train_config(items)
    out = cfg.out_dir or "."
    _write_manifest(out, "train", config_items(cfg),
                    {"notes": {"optimizer": "adam (beta1=0 default: momentum-free), bias-corrected, grad clip",
                               "cfg_dropout": "null-class dropout rate for guidance-ready conditioning",
                               "interpolant": "x_t = (1-t) x0 + t eps; t=0 data, t=1 noise"}})

    def progress(res, loss):
        if args.verbose and res.step % cfg.log_every == 0:
            print(f"step {res.step} loss {loss:.5f}", file=sys.stderr)

    res = train(cfg, progress)
    save_checkpoint(os.path.join(out, "final.darl"), res, cfg)
    _write_rows(os.path.join(out, "loss.csv"), ["step", "loss"], res.loss_curve)
    _write_rows(os.path.join(out, "val.csv"), ["step", "val_mse"], res.val_curve)
    last = res.val_curve[-1][1] if res.val_curve else res.loss_curve[-1][1] if res.loss_curve else float("nan")
    print(f"trained {cfg.router.label} for {res.step} steps; final val mse {last:.5f}")
    return 0


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows([[a, f"{b:.10g}"] for a, b in rows])


def cmd_sample(args) -> int:
    from .train import sample_ode
    ckpt, model = _load_model(args)
    rng = np.random.default_rng(args.seed)
    if args.class_id is None:
        labels = rng.integers(0, model.cfg.n_classes, size=args.n)
    else:
        labels = np.full(args.n, args.class_id)
    x = sample_ode(model, labels, args.steps, args.cfg_scale, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    np.savez(os.path.join(args.out, "samples.npz"), samples=x, labels=labels)
    _write_manifest(args.out, "sample", ckpt.header,
                    {"n": args.n, "steps": args.steps, "cfg_scale": args.cfg_scale, "seed": args.seed,
                     "checkpoint": args.checkpoint})
    print(f"wrote {args.n} samples to {args.out}/samples.npz")
    return 0


def cmd_evaluate(args) -> int:
    from .train import evaluate, heldout_set, make_valset
    ckpt, model = _load_model(args)
    cfg = ckpt.train_config
    held = heldout_set(cfg.seed, args.n, model.cfg.n_classes)
    vs = make_valset(cfg.seed, cfg.n_val, model.cfg.n_classes)
    rep = evaluate(model, held, vs, n=args.n, steps=args.steps, cfg_scale=args.cfg_scale, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.json"), "w") as fh:
        json.dump(dataclasses.asdict(rep), fh, indent=1)
    _write_manifest(args.out, "evaluate", ckpt.header, {"checkpoint": args.checkpoint, "n": args.n,
                                                        "steps": args.steps, "cfg_scale": args.cfg_scale})
    print(f"val_mse {rep.val_mse:.5f}  energy {rep.energy:.5f}  mmd {rep.mmd:.6f}")
    return 0


def _t_grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def cmd_diagnose(args) -> int:
    from .diagnostics import diagnose, make_diag_batch, write_report
    ckpt, model = _load_model(args)
    batch = make_diag_batch(args.seed, args.samples, model.cfg.n_classes)
    rep = diagnose(model, batch, t=args.t, t_grid=_t_grid(args.t_points), probe_pairs=args.probe_pairs,
                   lam=args.lam, checkpoint_id=os.path.basename(args.checkpoint))
    paths = write_report(args.out, rep, svg=args.svg)
    _write_manifest(args.out, "diagnose", ckpt.header, {"diagnostics": rep.metadata})
    print("\n".join(paths))
    return 0


def cmd_probe(args) -> int:
    from .diagnostics import make_diag_batch, timestep_probe
    ckpt, model = _load_model(args)
    batch = make_diag_batch(args.seed, args.pairs, model.cfg.n_classes)
    res = timestep_probe(model, batch, _t_grid(args.t_points), args.lam, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "probe.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["depth", "stream", "r2"])
        w.writerow([0, "x_t", f"{res.baseline_r2:.10g}"])
        for l, s, r in zip(res.depths, res.streams, res.r2):
            w.writerow([l, s, f"{r:.10g}"])
    _write_manifest(args.out, "probe", ckpt.header, {"pairs": args.pairs, "lam": args.lam,
                                                     "t_points": args.t_points})
    print(f"baseline x_t R2 {res.baseline_r2:.4f}; depth R2 " + " ".join(f"{r:.4f}" for r in res.r2))
    return 0


def cmd_cost_model(args) -> int:
    from .cost import cost_curve, s_star, sweep_report, write_cost_csv
    curve = cost_curve(args.L, args.alpha, args.step)
    os.makedirs(args.out, exist_ok=True)
    write_cost_csv(os.path.join(args.out, "cost.csv"), curve)
    if args.sweep:
        sweep_report(args.out, svg=not args.no_svg)
    _write_manifest(args.out, "cost-model", {"L": repr(args.L), "alpha": repr(args.alpha),
                                             "step": repr(args.step), "sweep": str(args.sweep)})
    print(f"s_star = {s_star(args.L, args.alpha):.4f}")
    return 0


def cmd_bench_agg(args) -> int:
    from .fused import bench, write_bench_csv
    dtype = np.float64 if args.dtype == "float64" else np.float32
    rows = bench(tuple(args.N), args.d, args.rows, args.reps, args.seed, dtype)
    os.makedirs(args.out, exist_ok=True)
    write_bench_csv(os.path.join(args.out, "bench.csv"), rows)
    _write_manifest(args.out, "bench-agg", {"N": ",".join(map(str, args.N)), "d": str(args.d),
                                            "rows": str(args.rows), "reps": str(args.reps), "dtype": args.dtype})
    for r in rows:
        print(f"N={r.N:3d} live ref {r.ref_live:6d} fused {r.fused_live:4d}  ns ref {r.ref_ns} fused {r.fused_ns}")
    return 0


# -- parser ---------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="darlab", description="Toy flow-matching transformers with depth routing.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint, curves and manifest")
    _add_config_flags(p, known_keys())
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(fn=cmd_train)

    def model_cmd(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--seed", type=int, default=0)
        _add_config_flags(p, _model_router_keys())
        p.set_defaults(fn=fn)
        return p

    p = model_cmd("sample", cmd_sample, "Euler ODE sampling with optional guidance")
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--cfg-scale", type=float, default=1.0)
    p.add_argument("--class-id", type=int, default=None)

    p = model_cmd("evaluate", cmd_evaluate, "validation MSE and sample distances")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--cfg-scale", type=float, default=1.0)

    p = model_cmd("diagnose", cmd_diagnose, "depth profiles, gate gradients, routing maps, probe")
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--t", type=float, default=1.0)
    p.add_argument("--t-points", type=int, default=11)
    p.add_argument("--probe-pairs", type=int, default=128)
    p.add_argument("--lam", type=float, default=1e-3)
    p.add_argument("--svg", action="store_true")

    p = model_cmd("probe", cmd_probe, "ridge probe of t from pooled hidden states")
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--t-points", type=int, default=11)
    p.add_argument("--lam", type=float, default=1e-3)

    p = sub.add_parser("cost-model", help="chunk-size cost curve and optimum")
    p.add_argument("--L", type=float, required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--step", type=float, default=0.01)
    p.add_argument("--sweep", action="store_true", help="also write sstar.csv over a depth/discount grid")
    p.add_argument("--no-svg", action="store_true")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_cost_model)

    p = sub.add_parser("bench-agg", help="fused vs staged aggregation benchmark")
    p.add_argument("--N", type=int, nargs="+", default=[1, 2, 4, 8, 16, 32, 57])
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    p.add_argument("--out", default=".")
    p.set_defaults(fn=cmd_bench_agg)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the message
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (DarlabError, ValueError, OSError) as exc:
        print(f"darlab {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
