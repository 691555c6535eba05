"""Chunk-size cost model: log(L/S + S) + a log S and its closed-form minimizer."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, VerificationError


def _check(L, alpha):
    if not L > 0:
        raise ContractError(f"L must be positive, got {L}")
    if not 0 < alpha < 1:
        raise ContractError(f"alpha must lie in (0, 1), got {alpha}")


def cost(S, L: float, alpha: float):
    """Per-aggregator cost, natural log.  Accepts scalar or array S."""
    _check(L, alpha)
    S_arr = np.asarray(S, dtype=np.float64)
    if np.any(S_arr <= 0):
        raise ContractError("chunk size must be positive")
    out = np.log(L / S_arr + S_arr) + alpha * np.log(S_arr)
    return float(out) if out.ndim == 0 else out


def s_star(L: float, alpha: float) -> float:
    _check(L, alpha)
    return math.sqrt(L * (1 - alpha) / (1 + alpha))


def derivative_sign_rule(S, L: float, alpha: float):
    """(1 + a) S^2 - (1 - a) L, which carries the sign of the cost derivative."""
    return (1 + alpha) * np.asarray(S, dtype=np.float64) ** 2 - (1 - alpha) * L


def nearest_divisor(L: int, target: float) -> int:
    divs = [s for s in range(1, int(L) + 1) if L % s == 0]
    return min(divs, key=lambda s: (abs(s - target), s))


@dataclass
class CostCurve:
    L: float
    alpha: float
    samples: list[tuple[float, float]] = field(default_factory=list)
    s_star: float = float("nan")


def cost_curve(L: float, alpha: float, step: float = 0.01) -> CostCurve:
    grid = np.arange(1, int(round(L / step)) + 1) * step
    c = cost(grid, L, alpha)
    return CostCurve(L, alpha, list(zip(grid.tolist(), c.tolist())), s_star(L, alpha))


@dataclass
class MinimizerReport:
    L: float
    alpha: float
    step: float
    s_star: float
    grid_argmin: float
    sign_changes: int
    checked_intervals: int


def verify_minimizer(L: float, alpha: float, step: float = 0.01) -> MinimizerReport:
    """Grid check of the U-shape claim.

    (a) the grid argmin lies within one step of the closed form;
    (b) on every grid interval not containing S*, the sign of the finite
        difference equals the sign of (1 + a) S^2 - (1 - a) L at both ends.
    Raises VerificationError naming the offending S otherwise.
    """
    _check(L, alpha)
    ss = s_star(L, alpha)
    grid = np.arange(1, int(math.floor(L / step + 1e-9)) + 1) * step
    c = cost(grid, L, alpha)
    arg = float(grid[int(np.argmin(c))])
    if abs(arg - ss) > step + 1e-12:
        raise VerificationError(f"grid argmin {arg} is more than one step from S*={ss}")
    diff = np.diff(c)
    lo, hi = grid[:-1], grid[1:]
    off = ~((lo <= ss) & (ss <= hi))
    rule_lo = np.sign(derivative_sign_rule(lo, L, alpha))
    rule_hi = np.sign(derivative_sign_rule(hi, L, alpha))
    d_sign = np.sign(diff)
    bad = off & ((d_sign != rule_lo) | (d_sign != rule_hi))
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise VerificationError(f"derivative sign mismatch on [{lo[i]}, {hi[i]}] (S*={ss})")
    changes = int(np.count_nonzero(np.diff(d_sign[d_sign != 0]) != 0))
    return MinimizerReport(L, alpha, step, ss, arg, changes, int(off.sum()))


@dataclass
class SweepRow:
    L: int
    alpha: float
    s_star: float
    s_int: int


def sweep(Ls, alphas) -> list[SweepRow]:
    return [SweepRow(int(L), float(a), s_star(L, a), nearest_divisor(int(L), s_star(L, a)))
            for L in Ls for a in alphas]


def write_cost_csv(path: str, curve: CostCurve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["S", "cost"])
        for S, c in curve.samples:
            w.writerow([f"{S:.6g}", f"{c:.10g}"])


def write_sstar_csv(path: str, rows: list[SweepRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["L", "alpha", "s_star", "s_int"])
        for r in rows:
            w.writerow([r.L, f"{r.alpha:.6g}", f"{r.s_star:.10g}", r.s_int])


def sweep_report(out_dir: str, Ls=(8, 16, 28, 56, 112, 224), alphas=None, svg: bool = True) -> list[SweepRow]:
    """Writes sstar.csv (and sstar.svg) for S* across depth and discount."""
    alphas = np.round(np.arange(0.1, 0.91, 0.1), 6) if alphas is None else alphas
    rows = sweep(Ls, alphas)
    os.makedirs(out_dir, exist_ok=True)
    write_sstar_csv(os.path.join(out_dir, "sstar.csv"), rows)
    if svg:
        from .plots import line_plot
        series = {f"alpha={a:g}": ([r.L for r in rows if r.alpha == a], [r.s_star for r in rows if r.alpha == a])
                  for a in alphas}
        line_plot(os.path.join(out_dir, "sstar.svg"), series, "L (sublayers)", "S*", logx=True)
    return rows
