"""Toy DiT/SiT blocks: token embedding, timestep embedder, adaLN-Zero sublayers,
velocity head.

Parameters live in a flat ``dict[str, Tensor]``; every function here takes that
dict plus the relevant prefix, so the routing layer can own the block order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import ContractError, NumericError
from .tensor import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 6
    d: int = 64
    tokens: int = 16
    d_in: int = 4
    n_classes: int = 4
    head_dim: int = 64
    mlp_ratio: int = 4
    freq_dim: int = 64

    def __post_init__(self):
        if self.n_blocks < 1 or self.d < 1 or self.tokens < 1 or self.d_in < 1:
            raise ContractError(f"invalid model config {self}")
        if self.d % self.head_dim:
            raise ContractError(f"d={self.d} not divisible by head_dim={self.head_dim}")
        if self.freq_dim % 2:
            raise ContractError("freq_dim must be even")

    @property
    def n_sublayers(self) -> int:
        return 2 * self.n_blocks

    @property
    def n_heads(self) -> int:
        return self.d // self.head_dim

    @property
    def null_class(self) -> int:
        return self.n_classes

    def sublayer_kind(self, l: int) -> str:
        """Sublayers are 1-indexed; odd ones are attention, even ones MLP."""
        if not 1 <= l <= self.n_sublayers:
            raise ContractError(f"sublayer index {l} outside 1..{self.n_sublayers}")
        return "attention" if l % 2 == 1 else "mlp"


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype)


def init_backbone(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> Params:
    d, L = cfg.d, cfg.n_sublayers
    z = lambda *shape: np.zeros(shape, dtype=dtype)  # noqa: E731
    p: dict[str, np.ndarray] = {}
    p["embed.w"] = _xavier(rng, cfg.d_in, d, dtype)
    p["embed.b"] = z(d)
    p["embed.pos"] = (0.02 * rng.standard_normal((cfg.tokens, d))).astype(dtype)
    cls = (0.02 * rng.standard_normal((cfg.n_classes + 1, d))).astype(dtype)
    cls[cfg.null_class] = 0.0
    p["embed.cls"] = cls
    p["temb.w1"] = (0.02 * rng.standard_normal((cfg.freq_dim, d))).astype(dtype)
    p["temb.b1"] = z(d)
    p["temb.w2"] = z(d, d)
    p["temb.b2"] = z(d)
    hidden = cfg.mlp_ratio * d
    for l in range(1, L + 1):
        pre = f"sub.{l}."
        p[pre + "ada.w"] = z(d, 3 * d)
        p[pre + "ada.b"] = z(3 * d)
        if cfg.sublayer_kind(l) == "attention":
            p[pre + "qkv.w"] = _xavier(rng, d, 3 * d, dtype)
            p[pre + "qkv.b"] = z(3 * d)
            p[pre + "proj.w"] = _xavier(rng, d, d, dtype)
            p[pre + "proj.b"] = z(d)
        else:
            p[pre + "fc1.w"] = _xavier(rng, d, hidden, dtype)
            p[pre + "fc1.b"] = z(hidden)
            p[pre + "fc2.w"] = _xavier(rng, hidden, d, dtype)
            p[pre + "fc2.b"] = z(d)
    p["head.ada.w"] = z(d, 2 * d)
    p["head.ada.b"] = z(2 * d)
    p["head.out.w"] = z(d, cfg.d_in)
    p["head.out.b"] = z(cfg.d_in)
    return {k: Tensor(v, requires_grad=True) for k, v in p.items()}


def check_finite(x: Tensor, what: str) -> None:
    if not np.isfinite(x.data).all():
        raise NumericError(f"non-finite values in {what}")


def embed(params: Params, cfg: ModelConfig, sample: Tensor, class_id: np.ndarray) -> Tensor:
    """Token embedding h0 = x W + b + pos + class embedding, shape (B, T, d)."""
    class_id = np.asarray(class_id, dtype=np.int64).reshape(-1)
    if sample.ndim != 3 or sample.shape[1:] != (cfg.tokens, cfg.d_in):
        raise ContractError(f"sample shape {sample.shape} != (B, {cfg.tokens}, {cfg.d_in})")
    if class_id.shape[0] != sample.shape[0]:
        raise ContractError("one class id per sample required")
    if (class_id < 0).any() or (class_id > cfg.null_class).any():
        raise ContractError(f"class id outside 0..{cfg.null_class}")
    h = tn.linear(sample, params["embed.w"], params["embed.b"]) + params["embed.pos"]
    cls = params["embed.cls"][class_id]
    return h + cls.reshape(cls.shape[0], 1, cfg.d)


def timestep_features(t: np.ndarray, freq_dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of 1000*t, shape (B, freq_dim)."""
    half = freq_dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = 1000.0 * np.asarray(t, dtype=np.float64).reshape(-1, 1) * freqs
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1).astype(dtype)


def timestep_embed(params: Params, cfg: ModelConfig, t) -> Tensor:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if (t < 0).any() or (t > 1).any() or not np.isfinite(t).all():
        raise ContractError("timestep must lie in [0, 1]")
    feats = Tensor(timestep_features(t, cfg.freq_dim, params["temb.w1"].dtype))
    hid = tn.silu(tn.linear(feats, params["temb.w1"], params["temb.b1"]))
    return tn.linear(hid, params["temb.w2"], params["temb.b2"])


def conditioning(params: Params, cfg: ModelConfig, t, class_id) -> tuple[Tensor, Tensor]:
    """Returns (e(t), c) with c = e(t) + class embedding."""
    e = timestep_embed(params, cfg, t)
    class_id = np.asarray(class_id, dtype=np.int64).reshape(-1)
    return e, e + params["embed.cls"][class_id]


def modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return x * (scale + 1.0) + shift


def _chunks(m: Tensor, n: int, d: int) -> list[Tensor]:
    B = m.shape[0]
    return [m[:, i * d:(i + 1) * d].reshape(B, 1, d) for i in range(n)]


def attention(params: Params, pre: str, x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    hd = d // n_heads
    qkv = tn.linear(x, params[pre + "qkv.w"], params[pre + "qkv.b"])
    q, k, v = (qkv[:, :, i * d:(i + 1) * d] for i in range(3))
    if n_heads > 1:
        q, k, v = (a.reshape(B, T, n_heads, hd).transpose(0, 2, 1, 3) for a in (q, k, v))
    att = tn.softmax(q @ k.swapaxes(-1, -2) * (1.0 / np.sqrt(hd)), axis=-1)
    o = att @ v
    if n_heads > 1:
        o = o.transpose(0, 2, 1, 3).reshape(B, T, d)
    return tn.linear(o, params[pre + "proj.w"], params[pre + "proj.b"])


def mlp(params: Params, pre: str, x: Tensor) -> Tensor:
    hid = tn.gelu(tn.linear(x, params[pre + "fc1.w"], params[pre + "fc1.b"]))
    return tn.linear(hid, params[pre + "fc2.w"], params[pre + "fc2.b"])


def sublayer(params: Params, cfg: ModelConfig, l: int, h: Tensor, cond_act: Tensor) -> Tensor:
    """Residual branch output f_l(h; t) for sublayer ``l``.

    ``cond_act`` is SiLU(c), shape (B, d).  The branch output is gated by the
    adaLN gate; how it is merged into the stream is the router's business.
    """
    check_finite(h, f"input of sublayer {l}")
    pre = f"sub.{l}."
    mod = tn.linear(cond_act, params[pre + "ada.w"], params[pre + "ada.b"])
    shift, scale, gate = _chunks(mod, 3, cfg.d)
    x = modulate(tn.layernorm(h), shift, scale)
    if cfg.sublayer_kind(l) == "attention":
        out = attention(params, pre, x, cfg.n_heads)
    else:
        out = mlp(params, pre, x)
    return out * gate


def velocity_head(params: Params, cfg: ModelConfig, h_final: Tensor, cond_act: Tensor) -> Tensor:
    mod = tn.linear(cond_act, params["head.ada.w"], params["head.ada.b"])
    shift, scale = _chunks(mod, 2, cfg.d)
    x = modulate(tn.layernorm(h_final), shift, scale)
    return tn.linear(x, params["head.out.w"], params["head.out.b"])
