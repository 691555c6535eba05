"""Binary checkpoint format.

Layout (little-endian)::

    b"DARL"  u32 version
    u32 n    n bytes of UTF-8 ``key = value`` text (configs, step, RNG state)
    u32 count
    count x { u32 name_len, name, u32 rank, rank x u32 extent, float32 data }

Tensor names are ``param/<name>``, ``adam.v/<name>`` and ``adam.m/<name>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .backbone import ModelConfig
from .config import build_train_config, config_items, format_config, model_router_items, parse_config_text
from .errors import ConfigMismatch, ContractError
from .router import Model, RouterConfig
from .tensor import Tensor
from .train import Adam, TrainConfig, TrainResult

MAGIC = b"DARL"
VERSION = 1


@dataclass
class Checkpoint:
    header: dict[str, str]
    tensors: dict[str, np.ndarray]

    @property
    def train_config(self) -> TrainConfig:
        keys = {k: v for k, v in self.header.items() if not k.startswith("ckpt.")}
        return build_train_config(keys)

    @property
    def step(self) -> int:
        return int(self.header["ckpt.step"])

    def model(self) -> Model:
        cfg = self.train_config
        params = {k.split("/", 1)[1]: Tensor(v.copy(), requires_grad=True)
                  for k, v in self.tensors.items() if k.startswith("param/")}
        return Model(cfg.model, cfg.router, params=params)

    def restore(self) -> tuple[TrainResult, TrainConfig]:
        """Rebuild model, optimizer and RNG for resuming training."""
        cfg = self.train_config
        model = self.model()
        opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip)
        opt.t = int(self.header["ckpt.opt_t"])
        for k in model.params:
            if f"adam.v/{k}" in self.tensors:
                opt.v[k] = self.tensors[f"adam.v/{k}"].copy()
            if f"adam.m/{k}" in self.tensors:
                opt.m[k] = self.tensors[f"adam.m/{k}"].copy()
        rng = np.random.default_rng()
        if self.header.get("ckpt.rng"):
            rng.bit_generator.state = json.loads(self.header["ckpt.rng"])
        res = TrainResult(model, opt, rng, step=self.step)
        return res, cfg


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    b = name.encode("utf-8")
    head = struct.pack("<I", len(b)) + b + struct.pack("<I", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    text = format_config(ckpt.header).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
             struct.pack("<I", len(ckpt.tensors))]
    parts += [_pack_tensor(k, v) for k, v in ckpt.tensors.items()]
    return b"".join(parts)


def decode(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise ContractError("not a checkpoint: bad magic bytes")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<I", buf, 8)
    off = 12
    header = parse_config_text(buf[off:off + n].decode("utf-8"), "<checkpoint header>")
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off:off + ln].decode("utf-8")
        off += ln
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        tensors[name] = arr.astype(np.float32)
    if off != len(buf):
        raise ContractError("trailing bytes after checkpoint records")
    return Checkpoint(header, tensors)


def make_checkpoint(res: TrainResult, cfg: TrainConfig) -> Checkpoint:
    header = config_items(cfg)
    header["ckpt.step"] = str(res.step)
    header["ckpt.opt_t"] = str(res.optimizer.t)
    header["ckpt.rng"] = json.dumps(res.rng.bit_generator.state, sort_keys=True, separators=(",", ":"))
    tensors: dict[str, np.ndarray] = {}
    for k, p in res.model.params.items():
        tensors[f"param/{k}"] = p.data
    for k, v in res.optimizer.v.items():
        tensors[f"adam.v/{k}"] = v
    for k, m in res.optimizer.m.items():
        tensors[f"adam.m/{k}"] = m
    return Checkpoint(header, tensors)


def model_checkpoint(model: Model, cfg: TrainConfig | None = None) -> Checkpoint:
    """Checkpoint with parameters only (no optimizer state)."""
    cfg = cfg or TrainConfig(model=model.cfg, router=model.rcfg)
    header = config_items(cfg)
    header.update({"ckpt.step": "0", "ckpt.opt_t": "0", "ckpt.rng": ""})
    return Checkpoint(header, {f"param/{k}": p.data for k, p in model.params.items()})


def save_checkpoint(path: str, state, cfg: TrainConfig | None = None) -> Checkpoint:
    if isinstance(state, Checkpoint):
        ckpt = state
    elif isinstance(state, Model):
        ckpt = model_checkpoint(state, cfg)
    else:
        ckpt = make_checkpoint(state, cfg)
    with open(path, "wb") as fh:
        fh.write(encode(ckpt))
    return ckpt


def load_checkpoint(path: str, expect: tuple[ModelConfig, RouterConfig] | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        ckpt = decode(fh.read())
    if expect is not None:
        want = model_router_items(*expect)
        got = {k: ckpt.header.get(k) for k in want}
        diff = {k: (got[k], want[k]) for k in want if got[k] != want[k]}
        if diff:
            raise ConfigMismatch(f"checkpoint config differs: {diff}")
    return ckpt
