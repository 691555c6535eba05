"""Flow-matching training, Euler ODE sampling with CFG, and sample-set metrics."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as tn
from .backbone import ModelConfig
from .data import make_dataset
from .errors import NumericError
from .router import Model, RouterConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

VAL_SEED_OFFSET = 7919
HELDOUT_SEED_OFFSET = 104729


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    t_dist: str = "uniform"
    beta1: float = 0.0
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    cfg_dropout: float = 0.1
    n_train: int = 4096
    n_val: int = 512
    log_every: int = 10
    eval_every: int = 100
    ckpt_every: int = 0
    out_dir: str = ""


class Adam:
    """Per-parameter adaptive steps with bias correction.

    ``beta1=0`` gives the momentum-free variant used by default.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.0,
                 beta2: float = 0.999, eps: float = 1e-8, grad_clip: float = 0.0):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.grad_clip = grad_clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()} if beta1 > 0 else {}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def grad_norm(self) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float(np.sum(p.grad.astype(np.float64) ** 2))
        return math.sqrt(total)

    def step(self) -> float:
        norm = self.grad_norm()
        scale = 1.0
        if self.grad_clip > 0 and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c2 = 1.0 - b2 ** self.t
        c1 = 1.0 - b1 ** self.t if b1 > 0 else 1.0
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad * scale if scale != 1.0 else p.grad
            v = self.v[k]
            v *= b2
            v += (1.0 - b2) * g * g
            if b1 > 0:
                m = self.m[k]
                m *= b1
                m += (1.0 - b1) * g
                upd = m / c1
            else:
                upd = g
            p.data -= (self.lr * upd / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)
        return norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- flow matching ------------------------------------------------------------
def interpolate(x0: np.ndarray, eps: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolant x_t = (1 - t) x0 + t eps (t=0 data, t=1 noise); target v* = eps - x0."""
    tt = np.asarray(t).reshape(-1, *([1] * (x0.ndim - 1))).astype(x0.dtype)
    return (1 - tt) * x0 + tt * eps, eps - x0


def flow_matching_loss(model: Model, x0, labels, t, eps) -> Tensor:
    xt, target = interpolate(x0, eps, t)
    pred = model(xt, labels, t)
    diff = pred - Tensor(target)
    return (diff * diff).mean()


def flow_matching_step(model: Model, x0, labels, t, eps) -> Tensor:
    """Velocity-prediction MSE with gradients populated on the model parameters."""
    loss = flow_matching_loss(model, x0, labels, t, eps)
    tn.backward(loss)
    return loss


@dataclass
class ValSet:
    x0: np.ndarray
    labels: np.ndarray
    t: np.ndarray
    eps: np.ndarray


def make_valset(seed: int, n: int, n_classes: int, dtype=np.float32) -> ValSet:
    x0, y = make_dataset(seed + VAL_SEED_OFFSET, n, n_classes, dtype)
    rng = np.random.default_rng(seed + 2 * VAL_SEED_OFFSET)
    t = rng.random(n)
    eps = rng.standard_normal(x0.shape).astype(dtype)
    return ValSet(x0, y, t, eps)


def heldout_set(seed: int, n: int, n_classes: int, dtype=np.float32):
    """Clean samples never seen in training, for distribution distances."""
    return make_dataset(seed + HELDOUT_SEED_OFFSET, n, n_classes, dtype)


def val_mse(model: Model, vs: ValSet, batch: int = 256) -> float:
    total = 0.0
    with tn.no_grad():
        for i in range(0, len(vs.labels), batch):
            sl = slice(i, i + batch)
            loss = flow_matching_loss(model, vs.x0[sl], vs.labels[sl], vs.t[sl], vs.eps[sl])
            total += float(loss.data) * (min(i + batch, len(vs.labels)) - i)
    return total / len(vs.labels)


@dataclass
class TrainResult:
    model: Model
    optimizer: Adam
    rng: np.random.Generator
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    step: int = 0


def _streams(seed: int):
    ss = np.random.SeedSequence(seed)
    data_ss, train_ss = ss.spawn(2)
    return int(data_ss.generate_state(1)[0]), np.random.default_rng(train_ss)


def train(cfg: TrainConfig, callback=None) -> TrainResult:
    """Train from scratch; the seed fixes data, init, t draws, noise and dropout."""
    data_seed, rng = _streams(cfg.seed)
    x_train, y_train = make_dataset(data_seed, cfg.n_train, cfg.model.n_classes)
    vs = make_valset(cfg.seed, cfg.n_val, cfg.model.n_classes) if cfg.eval_every else None
    model = Model(cfg.model, cfg.router, seed=cfg.seed)
    opt = Adam(model.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.grad_clip)
    res = TrainResult(model, opt, rng)
    return continue_training(res, cfg, x_train, y_train, vs, callback)


def continue_training(res: TrainResult, cfg: TrainConfig, x_train, y_train, vs, callback=None) -> TrainResult:
    from .checkpoint import save_checkpoint  # local: checkpoint imports this module

    model, opt, rng = res.model, res.optimizer, res.rng
    B, null = cfg.batch_size, cfg.model.null_class
    if vs is not None and res.step == 0:
        res.val_curve.append((0, val_mse(model, vs)))
    while res.step < cfg.steps:
        idx = rng.integers(0, len(y_train), size=B)
        x0, y = x_train[idx], y_train[idx].copy()
        y[rng.random(B) < cfg.cfg_dropout] = null
        t = sample_t(rng, B, cfg.t_dist)
        eps = rng.standard_normal(x0.shape).astype(x0.dtype)
        loss = flow_matching_step(model, x0, y, t, eps)
        lval = float(loss.data)
        if not math.isfinite(lval):
            _dump_nan(cfg, res, lval)
        opt.step()
        opt.zero_grad()
        res.step += 1
        if res.step % cfg.log_every == 0 or res.step == 1:
            res.loss_curve.append((res.step, lval))
        if vs is not None and res.step % cfg.eval_every == 0:
            res.val_curve.append((res.step, val_mse(model, vs)))
        if cfg.ckpt_every and cfg.out_dir and res.step % cfg.ckpt_every == 0:
            save_checkpoint(os.path.join(cfg.out_dir, f"ckpt_{res.step:06d}.darl"), res, cfg)
        if callback is not None:
            callback(res, lval)
    return res


def sample_t(rng: np.random.Generator, n: int, dist: str) -> np.ndarray:
    if dist == "uniform":
        return rng.random(n)
    if dist == "logit_normal":
        return 1.0 / (1.0 + np.exp(-rng.standard_normal(n)))
    raise ValueError(f"unknown t distribution {dist!r}")


def _dump_nan(cfg: TrainConfig, res: TrainResult, lval: float):
    info = {"step": res.step, "loss": lval,
            "param_norms": {k: float(np.linalg.norm(p.data)) for k, p in res.model.params.items()},
            "last_losses": res.loss_curve[-10:]}
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        with open(os.path.join(cfg.out_dir, "nan_dump.json"), "w") as fh:
            json.dump(info, fh, indent=1)
    raise NumericError(f"non-finite loss {lval} at step {res.step}")


# -- sampling -----------------------------------------------------------------
def velocity(model: Model, x: np.ndarray, labels: np.ndarray, t: float, cfg_scale: float = 1.0) -> np.ndarray:
    """Model velocity with classifier-free guidance v_null + w (v_cond - v_null)."""
    B = x.shape[0]
    tt = np.full(B, t)
    if cfg_scale == 1.0:
        return model(x, labels, tt).data
    null = np.full(B, model.cfg.null_class)
    both = model(np.concatenate([x, x]), np.concatenate([labels, null]), np.concatenate([tt, tt])).data
    v_cond, v_null = both[:B], both[B:]
    return v_null + cfg_scale * (v_cond - v_null)


def sample_ode(model: Model, labels, steps: int = 32, cfg_scale: float = 1.0,
               noise: np.ndarray | None = None, seed: int = 0) -> np.ndarray:
    """Euler integration of the learned velocity from noise (t=1) to data (t=0)."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    labels = np.asarray(labels, dtype=np.int64)
    if noise is None:
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((len(labels), model.cfg.tokens, model.cfg.d_in))
    x = np.asarray(noise, dtype=model.dtype).copy()
    dt = 1.0 / steps
    with tn.no_grad():
        for k in range(steps):
            t = 1.0 - k * dt
            x = x - dt * velocity(model, x, labels, t, cfg_scale)
    return x


# -- metrics --------------------------------------------------------------
def median_bandwidth(x: np.ndarray) -> float:
    flat = x.reshape(len(x), -1).astype(np.float64)
    d = cdist(flat, flat)
    return float(np.median(d[np.triu_indices(len(flat), 1)])) or 1.0


def rbf_mmd(x: np.ndarray, y: np.ndarray, bandwidth: float) -> float:
    """Biased (V-statistic) squared MMD with a Gaussian kernel; >= 0 up to rounding."""
    a = x.reshape(len(x), -1).astype(np.float64)
    b = y.reshape(len(y), -1).astype(np.float64)
    g = 1.0 / (2 * bandwidth ** 2)
    kxx = np.exp(-g * cdist(a, a, "sqeuclidean")).mean()
    kyy = np.exp(-g * cdist(b, b, "sqeuclidean")).mean()
    kxy = np.exp(-g * cdist(a, b, "sqeuclidean")).mean()
    return max(float(kxx + kyy - 2 * kxy), 0.0)


def energy_distance(x: np.ndarray, y: np.ndarray) -> float:
    a = x.reshape(len(x), -1).astype(np.float64)
    b = y.reshape(len(y), -1).astype(np.float64)
    val = 2 * cdist(a, b).mean() - cdist(a, a).mean() - cdist(b, b).mean()
    return max(float(val), 0.0)


@dataclass
class EvalReport:
    val_mse: float
    energy: float
    mmd: float
    per_class: dict[int, dict[str, float]]
    bandwidth: float


def evaluate(model: Model, heldout: tuple[np.ndarray, np.ndarray], vs: ValSet | None = None,
             n: int = 512, steps: int = 32, cfg_scale: float = 1.0, seed: int = 0,
             generated: np.ndarray | None = None) -> EvalReport:
    """Validation MSE plus energy distance / RBF-MMD of generated vs held-out samples."""
    x_ho, y_ho = heldout[0][:n], heldout[1][:n]
    if vs is None:
        vs = make_valset(seed, n, model.cfg.n_classes, model.dtype)
    mse = val_mse(model, vs)
    if generated is None:
        generated = sample_ode(model, y_ho, steps, cfg_scale, seed=seed)
    bw = median_bandwidth(x_ho)
    per_class = {}
    for c in np.unique(y_ho):
        m = y_ho == c
        per_class[int(c)] = {"n": int(m.sum()),
                             "mmd": rbf_mmd(generated[m], x_ho[m], bw),
                             "energy": energy_distance(generated[m], x_ho[m])}
    return EvalReport(mse, energy_distance(generated, x_ho), rbf_mmd(generated, x_ho, bw), per_class, bw)
