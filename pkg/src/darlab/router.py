"""Cross-layer routing: standard residual, U-Net-like long skips, and
diffusion-adaptive routing (softmax aggregation over prior sublayer outputs).

Sublayers are indexed 1..L.  Sublayer ``l`` consumes the aggregate ``h_l`` of
its source set and produces ``v_l``; ``v_0`` is the input embedding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import tensor as tn
from .backbone import ModelConfig, Params
from .errors import ContractError
from .tensor import Tensor

MODES = ("standard", "unet_skip", "dar")
QUERY_VARIANTS = ("static", "explicit_t", "dynamic")
POOLINGS = ("per_token", "mean_pooled")
FINAL = "final"
RMS_EPS = 1e-6


@dataclass(frozen=True)
class RouterConfig:
    mode: str = "dar"
    query_variant: str = "static"
    chunk_size: int = 4
    pooling: str = "per_token"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown routing mode {self.mode!r}")
        if self.query_variant not in QUERY_VARIANTS:
            raise ContractError(f"unknown query variant {self.query_variant!r}")
        if self.pooling not in POOLINGS:
            raise ContractError(f"unknown pooling {self.pooling!r}")
        if self.chunk_size < 1:
            raise ContractError("chunk_size must be positive")

    def validate(self, n_sublayers: int) -> None:
        if self.mode == "dar" and (self.chunk_size > n_sublayers or n_sublayers % self.chunk_size):
            raise ContractError(
                f"chunk_size {self.chunk_size} must divide L={n_sublayers}")

    @property
    def label(self) -> str:
        if self.mode != "dar":
            return self.mode
        return f"dar-{self.query_variant}-c{self.chunk_size}"


# -- source sets -------------------------------------------------------------
def chunk_of(l: int, S: int) -> int:
    return -(-l // S)


def source_indices(l: int, S: int) -> tuple[int, ...]:
    """Origin indices of the source set for sublayer ``l`` with chunk size ``S``.

    Prior chunk summaries c_0..c_{n-1} (c_j = v_{jS}) followed by the current
    chunk's sources v_{(n-1)S+1}..v_{l-1}.
    """
    if l < 1 or S < 1:
        raise ContractError(f"need l >= 1 and S >= 1, got l={l}, S={S}")
    n = chunk_of(l, S)
    summaries = [j * S for j in range(n)]
    intra = list(range((n - 1) * S + 1, l))
    return tuple(summaries + intra)


def final_source_indices(L: int, S: int) -> tuple[int, ...]:
    """Dedicated final aggregator: all N summaries plus the raw last chunk."""
    if L % S:
        raise ContractError(f"S={S} must divide L={L}")
    N = L // S
    return tuple([j * S for j in range(N)] + list(range((N - 1) * S + 1, L + 1)))


@dataclass
class SourceSet:
    indices: tuple[int, ...]
    sources: list[Tensor]
    units: list[Tensor] | None = None  # cached gain-free RMSNorm of each source

    def __len__(self) -> int:
        return len(self.indices)


def build_source_set(l: int, stored: dict[int, Tensor], S: int,
                     units: dict[int, Tensor] | None = None) -> SourceSet:
    idx = source_indices(l, S)
    return SourceSet(idx, [stored[i] for i in idx],
                     None if units is None else [units[i] for i in idx])


@dataclass
class RoutingWeights:
    consumer: int | str
    indices: tuple[int, ...]
    alpha: np.ndarray  # (B, T, n) per-token or (B, n) mean-pooled
    t: np.ndarray


# -- aggregation primitives --------------------------------------------------------
def aggregate_standard(h0: Tensor, branch_outputs: list[Tensor]) -> list[Tensor]:
    """Running stream h_1..h_{l}: h_{l+1} = h_l + f_l, starting from h0."""
    hs = [h0]
    for f in branch_outputs:
        hs.append(hs[-1] + f)
    return hs


def aggregate_standard_unrolled(h0: Tensor, branch_outputs: list[Tensor]) -> Tensor:
    total = h0.data.copy()
    for f in branch_outputs:
        total = total + f.data
    return Tensor(total)


def unet_pair(block: int, n_blocks: int) -> int:
    """Shallow partner of a deep block: pi(k) = K - k + 1, deep half only."""
    partner = n_blocks - block + 1
    if not 1 <= block <= n_blocks or partner >= block:
        raise ContractError(f"block {block} has no shallow partner among {n_blocks} blocks")
    return partner


def unet_deep_blocks(n_blocks: int) -> list[int]:
    return [k for k in range(1, n_blocks + 1) if n_blocks - k + 1 < k]


def aggregate_unet_skip(h: Tensor, shallow: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """psi(h, h_shallow) = [h ; h_shallow] W (+ b); W has shape (2d, d)."""
    return tn.linear(tn.concat([h, shallow], axis=-1), w, b)


def dar_query(variant: str, w: Tensor | None = None, e_t: Tensor | None = None,
              wq: Tensor | None = None, v_prev: Tensor | None = None) -> Tensor:
    """Query vector(s): static w; explicit w + e(t) (per sample); dynamic v_prev Wq."""
    if variant == "static":
        return w
    if variant == "explicit_t":
        return w + e_t.reshape(e_t.shape[0], 1, e_t.shape[-1])
    if variant == "dynamic":
        return v_prev @ wq
    raise ContractError(f"unknown query variant {variant!r}")


def dar_aggregate(query: Tensor, sources: list[Tensor], gain: Tensor | None = None,
                  pooling: str = "per_token", units: list[Tensor] | None = None,
                  eps: float = RMS_EPS) -> tuple[Tensor, Tensor]:
    """Softmax-weighted sum of sources with keys RMSNorm(v_i).

    Sources have shape (B, T, d).  ``query`` broadcasts against (B, T, d) for
    per-token routing (shape (d,), (B, 1, d) or (B, T, d)) or against (B, d)
    when mean-pooled.  Returns (h, alpha) with alpha of shape (B, T, n) or (B, n).
    """
    if not sources:
        raise ContractError("empty source set")
    d = sources[0].shape[-1]
    V = tn.stack(sources, axis=-2)  # (B, T, n, d)
    if pooling == "per_token":
        if units is None:
            keys = tn.rmsnorm(V, gain, eps)
            q = query if query.ndim == 1 else query.reshape(*query.shape[:-1], 1, d)
            logits = (keys * q).sum(axis=-1)
        else:
            # keys . q == units . (gain * q); avoids materializing the keys
            U = tn.stack(units, axis=-2)
            gq = query if gain is None else query * gain
            if gq.ndim == 1:
                logits = (U @ gq.reshape(d, 1)).reshape(*U.shape[:-1])
            else:
                gq = gq.reshape(*gq.shape[:-1], d, 1)
                logits = (U @ gq).reshape(*U.shape[:-1])
        alpha = tn.softmax(logits * (1.0 / math.sqrt(d)), axis=-1)  # (B, T, n)
        h = (alpha.reshape(*alpha.shape[:-1], 1, alpha.shape[-1]) @ V).reshape(*V.shape[:-2], d)
        return h, alpha
    if pooling == "mean_pooled":
        keys = tn.rmsnorm(V.mean(axis=1), gain, eps)  # (B, n, d)
        q = query if query.ndim == 1 else query.reshape(query.shape[0], 1, d)
        logits = (keys * q).sum(axis=-1) * (1.0 / math.sqrt(d))  # (B, n)
        alpha = tn.softmax(logits, axis=-1)
        B, n = alpha.shape
        h = (V * alpha.reshape(B, 1, n, 1)).sum(axis=-2)
        return h, alpha
    raise ContractError(f"unknown pooling {pooling!r}")


# -- network ---------------------------------------------------------------
def init_router(cfg: ModelConfig, rcfg: RouterConfig, dtype=np.float32) -> Params:
    d, L = cfg.d, cfg.n_sublayers
    p: dict[str, np.ndarray] = {}
    if rcfg.mode == "dar":
        for a in [*range(1, L + 1), FINAL]:
            p[f"route.{a}.gain"] = np.ones(d, dtype=dtype)
            if rcfg.query_variant == "dynamic":
                p[f"route.{a}.wq"] = np.zeros((d, d), dtype=dtype)
            else:
                p[f"route.{a}.w"] = np.zeros(d, dtype=dtype)
    elif rcfg.mode == "unet_skip":
        for k in unet_deep_blocks(cfg.n_blocks):
            w = np.zeros((2 * d, d), dtype=dtype)
            w[:d] = np.eye(d, dtype=dtype)
            p[f"skip.{k}.w"] = w
            p[f"skip.{k}.b"] = np.zeros(d, dtype=dtype)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


@dataclass
class Trace:
    v: dict[int, Tensor] = field(default_factory=dict)
    h: dict[int, Tensor] = field(default_factory=dict)
    h_final: Tensor | None = None
    z: list[Tensor] = field(default_factory=list)
    routing: dict = field(default_factory=dict)
    gates: dict = field(default_factory=dict)
    e_t: Tensor | None = None


class Model:
    """Toy flow-matching transformer with pluggable cross-layer routing."""

    def __init__(self, cfg: ModelConfig, rcfg: RouterConfig, seed: int = 0,
                 dtype=np.float32, params: Params | None = None):
        rcfg.validate(cfg.n_sublayers)
        self.cfg, self.rcfg = cfg, rcfg
        if params is None:
            rng = np.random.default_rng(seed)
            params = bb.init_backbone(cfg, rng, dtype)
            params.update(init_router(cfg, rcfg, dtype))
        self.params = params

    @property
    def dtype(self):
        return self.params["embed.w"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Model(self.cfg, self.rcfg, params=params)

    def __call__(self, x, class_id, t, **kw):
        return self.forward(x, class_id, t, **kw)

    def forward(self, x, class_id, t, trace: bool = False, gates: bool | dict = False,
                z_shift: dict[int, np.ndarray] | None = None):
        """Velocity prediction for tokens ``x`` (B, T, d_in) at times ``t`` (B,).

        Returns the velocity, or (velocity, Trace) when ``trace`` is set.
        ``gates`` (standard mode only) inserts measurement gates fixed at 1 on
        every (source, consumer) pair; a dict {consumer: values} overrides
        the gate values of selected consumers.  ``z_shift`` maps a block index k
        (1-based) to an additive offset on the block state z_k, used by
        finite-difference checks.
        """
        cfg, rcfg, P = self.cfg, self.rcfg, self.params
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        B = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        class_id = np.broadcast_to(np.asarray(class_id, dtype=np.int64), (B,))
        if gates is not False and rcfg.mode != "standard":
            raise ContractError("counterfactual gates require mode=standard")
        h0 = bb.embed(P, cfg, x, class_id)
        e_t, c = bb.conditioning(P, cfg, t, class_id)
        c_act = tn.silu(c)
        tr = Trace(e_t=e_t)
        self._z_shift = z_shift or {}
        v = {0: h0}
        tr.v = v
        L = cfg.n_sublayers

        if rcfg.mode == "dar":
            h_final = self._run_dar(v, e_t, c_act, t, tr)
        else:
            h_final = self._run_additive(v, c_act, tr, gates)
        tr.h_final = h_final
        out = bb.velocity_head(P, cfg, h_final, c_act)
        if trace:
            assert len(tr.h) == L
            return out, tr
        return out

    def _run_additive(self, v, c_act, tr: Trace, gates) -> Tensor:
        cfg, rcfg, P = self.cfg, self.rcfg, self.params
        L, K = cfg.n_sublayers, cfg.n_blocks
        deep = set(unet_deep_blocks(K)) if rcfg.mode == "unet_skip" else set()
        block_in: dict[int, Tensor] = {}
        h = v[0]
        for l in range(1, L + 2):
            if gates is not False:
                key = l if l <= L else FINAL
                init = gates.get(key) if isinstance(gates, dict) else None
                g = Tensor(np.ones(l, dtype=h.dtype) if init is None else np.array(init, dtype=h.dtype),
                           requires_grad=True)
                tr.gates[key] = g
                h = v[0] * g[0]
                for i in range(1, l):
                    h = h + v[i] * g[i]
            elif l > 1:
                h = h + v[l - 1]
            if l > 1 and l % 2 == 1:
                h = self._mark_z(tr, h)  # output of block (l - 1) / 2
            if l == L + 1:
                return h
            if l % 2 == 1:
                k = (l + 1) // 2
                block_in[k] = h
                if k in deep:
                    shallow = block_in[unet_pair(k, K)]
                    h = aggregate_unet_skip(h, shallow, P[f"skip.{k}.w"], P[f"skip.{k}.b"])
            tr.h[l] = h
            v[l] = bb.sublayer(P, cfg, l, h, c_act)
        raise AssertionError("unreachable")

    def _mark_z(self, tr: Trace, h: Tensor) -> Tensor:
        k = len(tr.z) + 1
        if k in self._z_shift:
            h = h + Tensor(np.asarray(self._z_shift[k], dtype=h.dtype))
        tr.z.append(h)
        return h

    def _dar_step(self, a, idx, v, units, e_t, t, tr: Trace) -> Tensor:
        P, rcfg = self.params, self.rcfg
        prev = max(idx) if a == FINAL else a - 1
        if rcfg.query_variant == "dynamic":
            v_prev = v[prev]
            if rcfg.pooling == "mean_pooled":
                v_prev = v_prev.mean(axis=1)
            q = dar_query("dynamic", wq=P[f"route.{a}.wq"], v_prev=v_prev)
        elif rcfg.query_variant == "explicit_t":
            q = dar_query("explicit_t", w=P[f"route.{a}.w"], e_t=e_t)
            if rcfg.pooling == "mean_pooled":
                q = q.reshape(q.shape[0], q.shape[-1])
        else:
            q = dar_query("static", w=P[f"route.{a}.w"])
        use_units = [units[i] for i in idx] if rcfg.pooling == "per_token" else None
        h, alpha = dar_aggregate(q, [v[i] for i in idx], P[f"route.{a}.gain"],
                                 rcfg.pooling, units=use_units)
        tr.routing[a] = RoutingWeights(a, idx, alpha.data, t)
        return h

    def _run_dar(self, v, e_t, c_act, t, tr: Trace) -> Tensor:
        cfg, rcfg, P = self.cfg, self.rcfg, self.params
        L, S = cfg.n_sublayers, rcfg.chunk_size
        units = {0: tn.rmsnorm(v[0], None, RMS_EPS)} if rcfg.pooling == "per_token" else {}
        for l in range(1, L + 1):
            h = self._dar_step(l, source_indices(l, S), v, units, e_t, t, tr)
            if l > 1 and l % 2 == 1:
                h = self._mark_z(tr, h)
            tr.h[l] = h
            v[l] = bb.sublayer(P, cfg, l, h, c_act)
            if rcfg.pooling == "per_token":
                units[l] = tn.rmsnorm(v[l], None, RMS_EPS)
        h_final = self._dar_step(FINAL, final_source_indices(L, S), v, units, e_t, t, tr)
        return self._mark_z(tr, h_final)
