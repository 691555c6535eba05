"""Depth-wise measurements: magnitude, gradient and similarity profiles of the
block states z_k, counterfactual gate gradients, routing-weight maps and a
ridge probe that regresses t from pooled hidden states.

Block state z_k is the output of block k for additive streams and, for
routed models, the aggregate handed to block k + 1 (the head input for k = K).
All measurements run in float64 on a copy of the model.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tn
from .data import make_dataset
from .errors import ContractError
from .router import FINAL, Model
from .tensor import Tensor
from .train import interpolate

DEFAULT_T_GRID = np.linspace(0.0, 1.0, 11)
CHUNK = 128


@dataclass
class DiagBatch:
    """Fixed (x0, label, noise) triples shared by every measurement."""
    x0: np.ndarray
    labels: np.ndarray
    eps: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "DiagBatch":
        return DiagBatch(self.x0[idx], self.labels[idx], self.eps[idx])


def make_diag_batch(seed: int, n: int = 512, n_classes: int = 4) -> DiagBatch:
    x0, y = make_dataset(seed, n, n_classes, np.float64)
    eps = np.random.default_rng(seed + 1).standard_normal(x0.shape)
    return DiagBatch(x0, y, eps)


def _f64(model: Model) -> Model:
    return model if model.dtype == np.float64 else model.astype(np.float64)


def _chunks(n: int, size: int = CHUNK):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


def _require(batch: DiagBatch) -> None:
    if len(batch) == 0:
        raise ContractError("diagnostics need a non-empty batch")


# -- pure reductions -----------------------------------------------------------
def token_rms(z: np.ndarray) -> np.ndarray:
    """Per-token RMS over the feature axis."""
    return np.sqrt(np.mean(np.square(z), axis=-1))


def rms_profile(states: list[np.ndarray]) -> np.ndarray:
    """Mean per-token RMS of each state, averaged over batch and tokens."""
    if not states or states[0].size == 0:
        raise ContractError("empty states")
    return np.array([float(np.mean(token_rms(z))) for z in states])


def token_cosine(a: np.ndarray, b: np.ndarray) -> tuple[float, int, int]:
    """Sum of per-token cosines, number of tokens used, number skipped (zero vectors)."""
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    ok = (na > 0) & (nb > 0)
    cos = np.sum(a * b, axis=-1)[ok] / (na[ok] * nb[ok])
    return float(np.sum(cos)), int(ok.sum()), int((~ok).sum())


@dataclass
class SimilarityProfile:
    cos: np.ndarray          # (K - 1,)
    skipped: int = 0         # token pairs dropped because one side was zero


def cosine_profile(states: list[np.ndarray]) -> SimilarityProfile:
    if len(states) < 2:
        raise ContractError("cosine profile needs at least two blocks")
    out, skipped = [], 0
    for a, b in zip(states[:-1], states[1:]):
        s, n, k = token_cosine(a, b)
        out.append(s / n if n else 0.0)
        skipped += k
    return SimilarityProfile(np.array(out), skipped)


# -- profiles over a model ---------------------------------------------------------
def block_states(model: Model, batch: DiagBatch, t: float = 1.0) -> list[np.ndarray]:
    """z_1..z_K for every sample, shape (B, T, d) each."""
    _require(batch)
    m = _f64(model)
    parts: list[list[np.ndarray]] = []
    with tn.no_grad():
        for sl in _chunks(len(batch)):
            tt = np.full(sl.stop - sl.start, t)
            xt, _ = interpolate(batch.x0[sl], batch.eps[sl], tt)
            _, tr = m(xt, batch.labels[sl], tt, trace=True)
            parts.append([z.data for z in tr.z])
    return [np.concatenate(p, axis=0) for p in zip(*parts)]


def forward_magnitude_profile(model: Model, batch: DiagBatch, t: float = 1.0) -> np.ndarray:
    return rms_profile(block_states(model, batch, t))


def block_similarity_profile(model: Model, batch: DiagBatch, t: float = 1.0) -> SimilarityProfile:
    return cosine_profile(block_states(model, batch, t))


def block_gradients(model: Model, batch: DiagBatch, t: float = 1.0, loss_scale: float = 1.0,
                    z_shift: dict[int, np.ndarray] | None = None) -> tuple[float, list[np.ndarray]]:
    """Loss (times ``loss_scale``) and dL/dz_k for the whole batch, chunk by chunk."""
    _require(batch)
    m = _f64(model)
    n = len(batch)
    loss_total, grads = 0.0, []
    for sl in _chunks(n):
        nb = sl.stop - sl.start
        tt = np.full(nb, t)
        xt, target = interpolate(batch.x0[sl], batch.eps[sl], tt)
        shift = {k: v[sl] for k, v in z_shift.items()} if z_shift else None
        pred, tr = m.forward(xt, batch.labels[sl], tt, trace=True, z_shift=shift)
        diff = pred - Tensor(target)
        loss = (diff * diff).mean() * (loss_scale * nb / n)
        tn.backward(loss)
        loss_total += float(loss.data)
        grads.append([np.zeros_like(z.data) if z.grad is None else z.grad.copy() for z in tr.z])
    tn.zero_grad(m.parameters())
    return loss_total, [np.concatenate(g, axis=0) for g in zip(*grads)]


def gradient_profile(model: Model, batch: DiagBatch, t: float = 1.0, loss_scale: float = 1.0) -> np.ndarray:
    return rms_profile(block_gradients(model, batch, t, loss_scale)[1])


# -- gates and routing -------------------------------------------------------------------
@dataclass
class DepthMap:
    """values[l] has shape (len(sources[l]), len(t_grid)); the head input is consumer L + 1."""
    t_grid: np.ndarray
    sources: dict[int, tuple[int, ...]] = field(default_factory=dict)
    values: dict[int, np.ndarray] = field(default_factory=dict)

    def rows(self):
        for l in sorted(self.values):
            for r, i in enumerate(self.sources[l]):
                for c, t in enumerate(self.t_grid):
                    yield l, i, float(t), float(self.values[l][r, c])


def _consumer(key, L: int) -> int:
    return L + 1 if key == FINAL else int(key)


def counterfactual_gate_gradients(model: Model, batch: DiagBatch, t_grid=DEFAULT_T_GRID,
                                  gate_values: dict | None = None) -> DepthMap:
    """dL/dg for a unit gate on every (source i, consumer l) pair of an additive stream."""
    if model.rcfg.mode != "standard":
        raise ContractError("gate gradients are defined for mode=standard")
    _require(batch)
    m = _f64(model)
    L, n = m.cfg.n_sublayers, len(batch)
    t_grid = np.asarray(t_grid, dtype=np.float64)
    out = DepthMap(t_grid)
    for c, t in enumerate(t_grid):
        acc: dict[int, np.ndarray] = {}
        for sl in _chunks(n):
            nb = sl.stop - sl.start
            tt = np.full(nb, t)
            xt, target = interpolate(batch.x0[sl], batch.eps[sl], tt)
            pred, tr = m.forward(xt, batch.labels[sl], tt, trace=True, gates=gate_values or True)
            diff = pred - Tensor(target)
            tn.backward((diff * diff).mean() * (nb / n))
            for key, g in tr.gates.items():
                l = _consumer(key, L)
                acc[l] = acc.get(l, 0.0) + g.grad
        for l, g in acc.items():
            if l not in out.values:
                out.sources[l] = tuple(range(l))
                out.values[l] = np.zeros((l, len(t_grid)))
            out.values[l][:, c] = g
    tn.zero_grad(m.parameters())
    return out


def gated_loss(model: Model, batch: DiagBatch, t: float, gate_values: dict) -> float:
    """Loss with selected gates moved off 1, for finite-difference checks."""
    m = _f64(model)
    n, total = len(batch), 0.0
    with tn.no_grad():
        for sl in _chunks(n):
            nb = sl.stop - sl.start
            tt = np.full(nb, t)
            xt, target = interpolate(batch.x0[sl], batch.eps[sl], tt)
            pred = m.forward(xt, batch.labels[sl], tt, gates=gate_values)
            total += float(np.mean((pred.data - target) ** 2)) * nb / n
    return total


def routing_weight_map(model: Model, batch: DiagBatch, t_grid=DEFAULT_T_GRID) -> DepthMap:
    """Routing weights averaged over batch and tokens for each consumer and t."""
    if model.rcfg.mode != "dar":
        raise ContractError("routing maps are defined for mode=dar")
    _require(batch)
    m = _f64(model)
    L, n = m.cfg.n_sublayers, len(batch)
    t_grid = np.asarray(t_grid, dtype=np.float64)
    out = DepthMap(t_grid)
    with tn.no_grad():
        for c, t in enumerate(t_grid):
            acc: dict[int, np.ndarray] = {}
            rows: dict[int, int] = {}
            for sl in _chunks(n):
                tt = np.full(sl.stop - sl.start, t)
                xt, _ = interpolate(batch.x0[sl], batch.eps[sl], tt)
                _, tr = m(xt, batch.labels[sl], tt, trace=True)
                for key, rw in tr.routing.items():
                    l = _consumer(key, L)
                    a = rw.alpha.reshape(-1, rw.alpha.shape[-1])
                    acc[l] = acc.get(l, 0.0) + a.sum(axis=0)
                    rows[l] = rows.get(l, 0) + a.shape[0]
                    out.sources[l] = tuple(rw.indices)
            for l, s in acc.items():
                out.values.setdefault(l, np.zeros((len(s), len(t_grid))))[:, c] = s / rows[l]
    return out


# -- timestep probe ------------------------------------------------------------------
def ridge_fit(X: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Closed-form ridge on standardized features.  Returns (mu, sd, w, intercept)."""
    if not lam > 0:
        raise ContractError("ridge penalty must be > 0")
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (X - mu) / sd
    yc = y - y.mean()
    w = np.linalg.solve(Z.T @ Z + lam * np.eye(Z.shape[1]), Z.T @ yc)
    return mu, sd, w, float(y.mean())


def ridge_predict(model, X: np.ndarray) -> np.ndarray:
    mu, sd, w, b = model
    return ((X - mu) / sd) @ w + b


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def probe_r2(X_train, y_train, X_test, y_test, lam: float = 1e-3) -> tuple[float, float]:
    """(train R^2, test R^2) of a ridge regressor."""
    fit = ridge_fit(X_train, y_train, lam)
    return r2_score(y_train, ridge_predict(fit, X_train)), r2_score(y_test, ridge_predict(fit, X_test))


@dataclass
class ProbeResult:
    depths: list[int]
    streams: list[str]              # "attention" or "mlp": which sublayer consumes h_l
    r2: np.ndarray                  # test R^2 per depth
    train_r2: np.ndarray
    baseline_r2: float              # raw x_t, pooled the same way
    baseline_train_r2: float
    n_train_pairs: int
    n_test_pairs: int
    lam: float


def probe_features(model: Model, batch: DiagBatch, t_grid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Token-mean pooled x_t (P, G, d_in) and h_l (L, P, G, d) over pairs x grid."""
    m = _f64(model)
    L, P, G = m.cfg.n_sublayers, len(batch), len(t_grid)
    raw = np.zeros((P, G, m.cfg.d_in))
    hid = np.zeros((L, P, G, m.cfg.d))
    with tn.no_grad():
        for g, t in enumerate(t_grid):
            for sl in _chunks(P):
                tt = np.full(sl.stop - sl.start, t)
                xt, _ = interpolate(batch.x0[sl], batch.eps[sl], tt)
                _, tr = m(xt, batch.labels[sl], tt, trace=True)
                raw[sl, g] = xt.mean(axis=1)
                for l in range(1, L + 1):
                    hid[l - 1, sl, g] = tr.h[l].data.mean(axis=1)
    return raw, hid, np.asarray(t_grid, dtype=np.float64)


def split_pairs(n: int, test_frac: float = 0.5, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_frac))
    if n_test == 0 or n_test == n:
        raise ContractError("probe split needs pairs on both sides")
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def timestep_probe(model: Model, batch: DiagBatch, t_grid=DEFAULT_T_GRID, lam: float = 1e-3,
                   test_frac: float = 0.5, seed: int = 0) -> ProbeResult:
    """Regress t from pooled states; every t of a pair lands on the same side of the split."""
    if not lam > 0:
        raise ContractError("ridge penalty must be > 0")
    _require(batch)
    t_grid = np.asarray(t_grid, dtype=np.float64)
    raw, hid, _ = probe_features(model, batch, t_grid)
    P, G = raw.shape[:2]
    tr_idx, te_idx = split_pairs(P, test_frac, seed)
    y = np.broadcast_to(t_grid, (P, G))
    y_tr, y_te = y[tr_idx].reshape(-1), y[te_idx].reshape(-1)

    def fit(F):
        return probe_r2(F[tr_idx].reshape(-1, F.shape[-1]), y_tr, F[te_idx].reshape(-1, F.shape[-1]), y_te, lam)

    base_tr, base_te = fit(raw)
    per = [fit(hid[l]) for l in range(hid.shape[0])]
    depths = list(range(1, hid.shape[0] + 1))
    return ProbeResult(depths, [model.cfg.sublayer_kind(l) for l in depths],
                       np.array([p[1] for p in per]), np.array([p[0] for p in per]),
                       base_te, base_tr, len(tr_idx), len(te_idx), lam)


# -- report ------------------------------------------------------------------------------
@dataclass
class DiagnosticReport:
    rms_fwd: np.ndarray
    rms_grad: np.ndarray
    cos_sim: np.ndarray
    cos_skipped: int
    gate_grad: DepthMap | None
    routing_map: DepthMap | None
    probe: ProbeResult | None
    metadata: dict = field(default_factory=dict)

    def check_finite(self) -> bool:
        arrays = [self.rms_fwd, self.rms_grad, self.cos_sim]
        for m in (self.gate_grad, self.routing_map):
            if m is not None:
                arrays += list(m.values.values())
        if self.probe is not None:
            arrays += [self.probe.r2, np.array([self.probe.baseline_r2])]
        return all(np.all(np.isfinite(a)) for a in arrays)


def diagnose(model: Model, batch: DiagBatch, t: float = 1.0, t_grid=DEFAULT_T_GRID,
             probe_pairs: int = 128, lam: float = 1e-3, checkpoint_id: str = "") -> DiagnosticReport:
    """Every measurement that applies to the model's routing mode."""
    states = block_states(model, batch, t)
    sim = cosine_profile(states)
    _, grads = block_gradients(model, batch, t)
    mode = model.rcfg.mode
    gates = counterfactual_gate_gradients(model, batch, t_grid) if mode == "standard" else None
    routing = routing_weight_map(model, batch, t_grid) if mode == "dar" else None
    probe = None
    if probe_pairs:
        probe = timestep_probe(model, batch.subset(slice(0, min(probe_pairs, len(batch)))), t_grid, lam)
    meta = {"checkpoint": checkpoint_id, "samples": len(batch), "t": t,
            "t_grid": [float(x) for x in t_grid], "mode": model.rcfg.label, "probe_pairs": probe_pairs}
    return DiagnosticReport(rms_profile(states), rms_profile(grads), sim.cos, sim.skipped,
                            gates, routing, probe, meta)


def _write(path: str, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def write_report(out_dir: str, rep: DiagnosticReport, svg: bool = False) -> list[str]:
    """Writes diagnostics.csv, gates.csv, routing.csv and probe.csv (and SVGs if asked)."""
    os.makedirs(out_dir, exist_ok=True)
    K = len(rep.rms_fwd)
    paths = [os.path.join(out_dir, f) for f in ("diagnostics.csv", "gates.csv", "routing.csv", "probe.csv")]
    _write(paths[0], ["block", "rms_fwd", "rms_grad", "cos_sim"],
           [[k + 1, f"{rep.rms_fwd[k]:.10g}", f"{rep.rms_grad[k]:.10g}",
             f"{rep.cos_sim[k]:.10g}" if k < K - 1 else ""] for k in range(K)])
    gate_rows = rep.gate_grad.rows() if rep.gate_grad else []
    _write(paths[1], ["layer", "source", "t", "grad"], ([l, i, f"{t:.6g}", f"{v:.10g}"] for l, i, t, v in gate_rows))
    route_rows = rep.routing_map.rows() if rep.routing_map else []
    _write(paths[2], ["layer", "source", "t", "weight"], ([l, i, f"{t:.6g}", f"{v:.10g}"] for l, i, t, v in route_rows))
    probe_rows = []
    if rep.probe is not None:
        probe_rows.append([0, "x_t", f"{rep.probe.baseline_r2:.10g}"])
        probe_rows += [[l, s, f"{r:.10g}"] for l, s, r in zip(rep.probe.depths, rep.probe.streams, rep.probe.r2)]
    _write(paths[3], ["depth", "stream", "r2"], probe_rows)
    if svg:
        paths += _write_svgs(out_dir, rep)
    return paths


def _write_svgs(out_dir: str, rep: DiagnosticReport) -> list[str]:
    from .plots import line_plot
    K = len(rep.rms_fwd)
    blocks = list(range(1, K + 1))
    out = [os.path.join(out_dir, "profiles.svg")]
    line_plot(out[0], {"rms_fwd": (blocks, rep.rms_fwd), "rms_grad": (blocks, rep.rms_grad)},
              "block", "RMS", logy=True)
    out.append(os.path.join(out_dir, "cosine.svg"))
    line_plot(out[-1], {"cos(z_k, z_k+1)": (blocks[:-1], rep.cos_sim)}, "block", "cosine")
    if rep.probe is not None:
        out.append(os.path.join(out_dir, "probe.svg"))
        p = rep.probe
        line_plot(out[-1], {"h_l": (p.depths, p.r2), "x_t": (p.depths, [p.baseline_r2] * len(p.depths))},
                  "depth", "test R^2")
    for name, m in (("gates", rep.gate_grad), ("routing", rep.routing_map)):
        if m is None:
            continue
        out.append(os.path.join(out_dir, f"{name}.svg"))
        L = max(m.values)
        line_plot(out[-1], {f"source {i}": (m.t_grid, m.values[L][r]) for r, i in enumerate(m.sources[L])},
                  "t", f"{name} (consumer {L})")
    return out
