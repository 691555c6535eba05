"""Streaming depth aggregation with an online-softmax recurrence.

The forward touches each source buffer once and keeps only the running
statistics (max logit m, normalizer Z, weighted accumulator s) plus the
current source's key.  The backward makes two streaming passes: one to
recover (m, Z, s), one to recompute the RMSNorm intermediates and emit all
gradients.  Rows (tokens) are independent and are processed together.

Source accesses go through ``_Reader`` so reads are counted exactly; live
intermediate storage is tracked in elements per token by ``LiveCounter``.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .tensor import _unbroadcast

RMS_EPS = 1e-6


@dataclass
class ReadAudit:
    forward: list[int]
    backward: list[int]

    @classmethod
    def empty(cls, n: int) -> "ReadAudit":
        return cls([0] * n, [0] * n)

    @property
    def total_forward(self) -> int:
        return sum(self.forward)

    @property
    def total_backward(self) -> int:
        return sum(self.backward)


class _Reader:
    def __init__(self, sources, audit: ReadAudit, phase: str, rows: int, d: int):
        self.sources, self.audit, self.phase = sources, audit, phase
        self.rows, self.d = rows, d

    def __len__(self):
        return len(self.sources)

    def read(self, i: int) -> np.ndarray:
        getattr(self.audit, self.phase)[i] += 1
        return np.asarray(self.sources[i]).reshape(self.rows, self.d)


@dataclass
class LiveCounter:
    """Tracks live per-token intermediate elements (vector-valued buffers only)."""
    live: int = 0
    peak: int = 0

    def alloc(self, n: int) -> None:
        self.live += n
        self.peak = max(self.peak, self.live)

    def free(self, n: int) -> None:
        self.live -= n


@dataclass
class StreamStats:
    m: np.ndarray  # (R,) running max logit
    Z: np.ndarray  # (R,) running normalizer
    s: np.ndarray  # (R, d) running weighted accumulator

    def finalize(self) -> np.ndarray:
        return self.s / self.Z[:, None]


@dataclass
class Epilogue:
    """Optional downstream LayerNorm + adaLN modulate: LN(h) * (1 + scale) + shift."""
    shift: np.ndarray
    scale: np.ndarray
    eps: float = 1e-6


@dataclass
class FusedForward:
    h: np.ndarray
    stats: StreamStats
    audit: ReadAudit
    out: np.ndarray | None = None
    live_peak: int = 0


@dataclass
class FusedGrads:
    sources: list[np.ndarray]
    query: np.ndarray
    gain: np.ndarray
    audit: ReadAudit
    shift: np.ndarray | None = None
    scale: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _layout(query, sources):
    if len(sources) < 1:
        raise ContractError("fused aggregation needs at least one source")
    shape = np.shape(sources[0])
    for v in sources:
        if np.shape(v) != shape:
            raise ContractError("all sources must share one shape")
    d = shape[-1]
    rows = int(np.prod(shape[:-1], dtype=np.int64))
    q = np.asarray(query)
    if q.shape[-1] != d:
        raise ContractError(f"query width {q.shape[-1]} != source width {d}")
    q_rows = q if q.ndim == 1 else np.broadcast_to(q, shape).reshape(rows, d)
    return shape, rows, d, q_rows


def _stream_stats(reader: _Reader, q, gain, eps, live: LiveCounter | None = None):
    """One pass over the sources: returns StreamStats of the full set."""
    d = reader.d
    inv = 1.0 / math.sqrt(d)
    m = Z = s = None
    for i in range(len(reader)):
        v = reader.read(i)
        r = np.sqrt((v * v).mean(axis=-1) + eps)
        k = v / r[:, None]
        if gain is not None:
            k = k * gain
        if live is not None:
            live.alloc(d)
        logit = (k * q).sum(axis=-1) * inv
        if m is None:
            m = logit
            Z = np.ones_like(logit)
            s = v.copy()
            if live is not None:
                live.alloc(d)
        else:
            m_new = np.maximum(m, logit)
            c = np.exp(m - m_new)
            p = np.exp(logit - m_new)
            Z = Z * c + p
            s = s * c[:, None] + p[:, None] * v
            m = m_new
        if live is not None:
            live.free(d)
    return StreamStats(m, Z, s)


def _epilogue_forward(h, ep: Epilogue, shape):
    mu = h.mean(axis=-1, keepdims=True)
    xc = h - mu
    r = np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + ep.eps)
    u = xc / r
    scale = np.broadcast_to(ep.scale, shape).reshape(h.shape)
    shift = np.broadcast_to(ep.shift, shape).reshape(h.shape)
    return u * (1.0 + scale) + shift, u, r, scale


def fused_forward(query, sources, gain=None, eps: float = RMS_EPS,
                  epilogue: Epilogue | None = None) -> FusedForward:
    """h = sum_i softmax_i(q . RMSNorm(v_i) / sqrt(d)) v_i, one read per source."""
    shape, R, d, q = _layout(query, sources)
    audit = ReadAudit.empty(len(sources))
    live = LiveCounter()
    stats = _stream_stats(_Reader(sources, audit, "forward", R, d), q, gain, eps, live)
    h = stats.finalize()
    out = None
    if epilogue is not None:
        out = _epilogue_forward(h, epilogue, shape)[0].reshape(shape)
    return FusedForward(h.reshape(shape), stats, audit, out, live.peak)


def fused_backward(grad_out, query, sources, gain=None, stats: StreamStats | None = None,
                   eps: float = RMS_EPS, epilogue: Epilogue | None = None) -> FusedGrads:
    """Gradients w.r.t. sources, query and key gain from two streaming passes.

    ``grad_out`` is dL/dh, or dL/d(epilogue output) when ``epilogue`` is set.
    ``stats``, if given, must match what pass one recovers.
    """
    shape, R, d, q = _layout(query, sources)
    n = len(sources)
    audit = ReadAudit.empty(n)
    reader = _Reader(sources, audit, "backward", R, d)
    inv = 1.0 / math.sqrt(d)

    # pass 1: recover softmax statistics
    rec = _stream_stats(reader, q, gain, eps)
    if stats is not None:
        if stats.s.shape != rec.s.shape or stats.m.shape != rec.m.shape:
            raise ContractError("stream stats do not match the sources")
        tol = 1e-4 if rec.s.dtype == np.float32 else 1e-9
        if not (np.allclose(stats.m, rec.m, rtol=tol, atol=tol)
                and np.allclose(stats.Z, rec.Z, rtol=tol, atol=tol)
                and np.allclose(stats.s, rec.s, rtol=tol, atol=tol)):
            raise ContractError("stream stats do not match the sources")
    m, Z = rec.m, rec.Z
    h = rec.finalize()

    g = np.asarray(grad_out).reshape(R, d)
    d_shift = d_scale = None
    if epilogue is not None:
        _, u_h, r_h, scale = _epilogue_forward(h, epilogue, shape)
        d_shift = _unbroadcast(g.reshape(shape), np.shape(epilogue.shift))
        d_scale = _unbroadcast((g * u_h).reshape(shape), np.shape(epilogue.scale))
        du = g * (1.0 + scale)
        du_c = du - du.mean(axis=-1, keepdims=True)
        g = (du_c - u_h * (du * u_h).mean(axis=-1, keepdims=True)) / r_h
    gh_dot_h = (g * h).sum(axis=-1)

    # pass 2: recompute per-source intermediates, emit gradients
    d_src = []
    dq = np.zeros((R, d), dtype=h.dtype)
    dgain = np.zeros(d, dtype=h.dtype)
    for i in range(n):
        v = reader.read(i)
        r = np.sqrt((v * v).mean(axis=-1) + eps)
        u = v / r[:, None]
        k = u * gain if gain is not None else u
        logit = (k * q).sum(axis=-1) * inv
        a = np.exp(logit - m) / Z
        dv = a[:, None] * g
        dlogit = a * ((g * v).sum(axis=-1) - gh_dot_h)
        dq += dlogit[:, None] * k * inv
        dk = dlogit[:, None] * q * inv
        if gain is not None:
            dgain += (dk * u).sum(axis=0)
            dk = dk * gain
        dv += (dk - u * (dk * u).mean(axis=-1, keepdims=True)) / r[:, None]
        d_src.append(dv.reshape(shape))

    q0 = np.asarray(query)
    dq_out = dq.sum(axis=0) if q0.ndim == 1 else _unbroadcast(dq.reshape(shape), q0.shape)
    return FusedGrads(d_src, dq_out, dgain if gain is not None else np.zeros(0), audit, d_shift, d_scale)


# -- naive staged reference (for traffic and storage accounting) -------------------
def staged_reference(query, sources, gain=None, eps: float = RMS_EPS, grad_h=None):
    """Unfused pipeline: RMSNorm, dot, softmax and weighted sum as separate
    stages with materialized [N, R, d] intermediates.

    Returns (h, audit, live_peak[, grads]).  Each stage that needs the raw
    sources reads them again.
    """
    shape, R, d, q = _layout(query, sources)
    n = len(sources)
    audit = ReadAudit.empty(n)
    fw = _Reader(sources, audit, "forward", R, d)
    live = LiveCounter()
    inv = 1.0 / math.sqrt(d)
    # stage 1: RMS statistics
    r = np.stack([np.sqrt((fw.read(i) ** 2).mean(axis=-1) + eps) for i in range(n)])
    # stage 2: normalized keys
    live.alloc(n * d)
    keys = np.stack([fw.read(i) / r[i][:, None] for i in range(n)])
    if gain is not None:
        keys = keys * gain
    # stage 3 + 4: logits and softmax
    logits = (keys * q).sum(axis=-1) * inv
    a = np.exp(logits - logits.max(axis=0))
    a = a / a.sum(axis=0)
    # stage 5: weighted sum
    live.alloc(d)
    h = sum(a[i][:, None] * fw.read(i) for i in range(n))
    if grad_h is None:
        return h.reshape(shape), audit, live.peak

    bw = _Reader(sources, audit, "backward", R, d)
    g = np.asarray(grad_h).reshape(R, d)
    # weighted-sum backward: needs the sources for dL/da
    ga = np.stack([(g * bw.read(i)).sum(axis=-1) for i in range(n)])
    dlogit = a * (ga - (ga * a).sum(axis=0))
    dq = (dlogit[..., None] * keys).sum(axis=0) * inv
    dk = dlogit[..., None] * q * inv
    u = np.stack([bw.read(i) / r[i][:, None] for i in range(n)])
    dgain = (dk * u).sum(axis=(0, 1)) if gain is not None else np.zeros(0)
    if gain is not None:
        dk = dk * gain
    grads = []
    for i in range(n):
        v = bw.read(i)
        dv = a[i][:, None] * g
        # RMSNorm backward recomputes from the source
        ui = v / r[i][:, None]
        dv = dv + (dk[i] - ui * (dk[i] * ui).mean(axis=-1, keepdims=True)) / r[i][:, None]
        grads.append(dv.reshape(shape))
    q0 = np.asarray(query)
    dq = dq.sum(axis=0) if q0.ndim == 1 else _unbroadcast(dq.reshape(shape), q0.shape)
    return h.reshape(shape), audit, live.peak, (grads, dq, dgain)


@dataclass
class BenchRow:
    N: int
    d: int
    ref_live: int
    fused_live: int
    ref_ns: int
    fused_ns: int


def bench(Ns=(1, 2, 4, 8, 16, 32, 57), d: int = 64, rows: int = 256, repetitions: int = 5,
          seed: int = 0, dtype=np.float32) -> list[BenchRow]:
    """Wall time (median ns, forward) and peak live intermediates per token."""
    rng = np.random.default_rng(seed)
    out = []
    for N in Ns:
        src = [rng.standard_normal((rows, d)).astype(dtype) for _ in range(N)]
        q = rng.standard_normal(d).astype(dtype)
        gain = (1 + 0.1 * rng.standard_normal(d)).astype(dtype)
        ref_t, fus_t = [], []
        for _ in range(repetitions):
            t0 = time.perf_counter_ns()
            _, _, ref_live = staged_reference(q, src, gain)
            t1 = time.perf_counter_ns()
            res = fused_forward(q, src, gain)
            t2 = time.perf_counter_ns()
            ref_t.append(t1 - t0)
            fus_t.append(t2 - t1)
        out.append(BenchRow(N, d, ref_live, res.live_peak, int(np.median(ref_t)), int(np.median(fus_t))))
    return out


def write_bench_csv(path: str, rows: list[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "d", "ref_live", "fused_live", "ref_ns", "fused_ns"])
        for r in rows:
            w.writerow([r.N, r.d, r.ref_live, r.fused_live, r.ref_ns, r.fused_ns])
