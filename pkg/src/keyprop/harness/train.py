"""Adam training loop, prediction and evaluation."""

from __future__ import annotations

import dataclasses
import logging
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import archive
from .. import tensor as T
from ..model import Checkpoint, ModelConfig, checkpoint_save, init_params, model_forward
from ..synthdata import rng_for, sub_seed
from ..tensor import NonFiniteError, Tensor, no_grad
from .data import SampleArrays
from .metrics import MetricsReport, compute_metrics

log = logging.getLogger("keyprop.train")

DTYPES = {"float32": np.float32, "float64": np.float64}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3.2e-4
    batch: int = 8
    steps: int = 2000
    hole_weight: float = 2.0
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50
    ckpt_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        for name in ("lr", "batch", "log_every", "ckpt_every", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0 or self.hole_weight < 0 or self.seed < 0:
            raise ValueError("steps, hole_weight and seed must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        return self

    def scalars(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(DTYPES).index(v) if f.name == "dtype" else v
        return out

    @classmethod
    def from_scalars(cls, values: dict) -> "TrainConfig":
        kw = {}
        for f in dataclasses.fields(cls):
            if f.name in values:
                v = values[f.name]
                if f.name == "dtype":
                    kw[f.name] = list(DTYPES)[int(v)]
                elif isinstance(f.default, int):
                    kw[f.name] = int(v)
                else:
                    kw[f.name] = float(v)
        return cls(**kw)


# ---------------------------------------------------------------------------
# loss and optimiser


def reconstruction_loss(pred: Tensor, gt: np.ndarray, mask: np.ndarray, hole_weight: float) -> Tensor:
    """``mean|y - gt| + λ · mean over hole pixels |y - gt|``."""
    err = T.absolute(T.sub(pred, Tensor(gt.astype(pred.dtype))))
    loss = T.mean(err)
    if hole_weight == 0:
        return loss
    m = np.broadcast_to(mask, gt.shape).astype(pred.dtype)
    n = float(m.sum())
    if n == 0:
        return loss
    hole = T.scale(T.sum(T.mul(err, Tensor(m))), 1.0 / n)
    return T.add(loss, T.scale(hole, hole_weight))


class Adam:
    def __init__(self, params: dict, cfg: TrainConfig, state: dict | None = None, step: int = 0):
        self.cfg = cfg
        self.t = step
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        for k, arr in (state or {}).items():
            base, kind = k.rsplit(".", 1)
            getattr(self, kind)[base] = arr.astype(params[base].dtype, copy=True)

    def update(self, params: dict):
        c = self.cfg
        self.t += 1
        b1, b2 = c.beta1, c.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (c.lr * (m / corr1) / (np.sqrt(v / corr2) + c.eps)).astype(p.dtype)

    def state(self) -> dict:
        out = {f"{k}.m": v for k, v in self.m.items()}
        out.update({f"{k}.v": v for k, v in self.v.items()})
        return out


def batch_indices(seed: int, step: int, n: int, batch: int) -> np.ndarray:
    """Batch for ``step``; a pure function of (seed, step), which makes resuming exact."""
    return rng_for(seed, "batch", step).choice(n, size=min(batch, n), replace=False)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list  # (step, loss) for every step run in this call


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    data: SampleArrays,
    out_dir: str | None = None,
    resume: Checkpoint | None = None,
    until: int | None = None,
    on_log: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run Adam from ``resume`` (or a fresh init) up to ``until`` (default
    ``train_cfg.steps``) steps in total.

    With ``out_dir`` a checkpoint ``ckpt_<step>.kpt`` is written every
    ``ckpt_every`` steps and ``final.kpt`` at the end.
    """
    model_cfg.validate()
    train_cfg.validate()
    dtype = DTYPES[train_cfg.dtype]
    data = data.astype(dtype)
    if resume is not None:
        params = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in resume.params.items()}
        start = resume.step
        opt = Adam(params, train_cfg, resume.opt, start)
    else:
        params = init_params(model_cfg, sub_seed(train_cfg.seed, "init") & 0xFFFFFFFF, dtype)
        start = 0
        opt = Adam(params, train_cfg)
    end = train_cfg.steps if until is None else until
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    losses = []

    def snapshot(step):
        return Checkpoint.from_tensors(model_cfg, params, step, opt.state(), train_cfg.scalars())

    for step in range(start, end):
        idx = batch_indices(train_cfg.seed, step, len(data), train_cfg.batch)
        b = data.take(idx)
        try:
            pred = model_forward(model_cfg, params, b.target, b.keys, b.flows, b.fb)
            loss = reconstruction_loss(pred, b.gt, b.mask, train_cfg.hole_weight)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NonFiniteError(f"loss is {value}")
            for p in params.values():
                p.grad = None
            loss.backward()
        except NonFiniteError as err:
            dump = _dump_batch(out_dir, step, train_cfg.seed, idx, b)
            raise TrainingError(
                f"non-finite value at step {step} (batch seed {train_cfg.seed}, step {step}, "
                f"indices {idx.tolist()}): {err}" + (f"; batch saved to {dump}" if dump else "")
            ) from None
        opt.update(params)
        losses.append((step, value))
        if step % train_cfg.log_every == 0 or step == end - 1:
            log.info("step=%d loss=%.6f", step, value)
            if on_log:
                on_log(step, value)
        if out_dir and (step + 1) % train_cfg.ckpt_every == 0:
            checkpoint_save(snapshot(step + 1), os.path.join(out_dir, f"ckpt_{step + 1}.kpt"))
    final = snapshot(max(end, start))
    if out_dir:
        checkpoint_save(final, os.path.join(out_dir, "final.kpt"))
    return TrainResult(final, losses)


def _dump_batch(out_dir, step, seed, idx, b: SampleArrays):
    if not out_dir:
        return None
    path = os.path.join(out_dir, f"nonfinite_step_{step}.kpt")
    entries = {
        "target": b.target,
        "keys": b.keys,
        "flows": b.flows,
        "fb": b.fb,
        "gt": b.gt,
        "indices": idx.astype(np.float64),
        "seed": np.array(float(seed)),
    }
    try:
        archive.save(path, entries)
    except OSError:
        return None
    return path


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(model_cfg: ModelConfig, params: dict, data: SampleArrays, batch: int = 16) -> np.ndarray:
    """Composited predictions ``N×H×W×3`` without recording a graph."""
    dtype = next(iter(params.values())).dtype
    outs = []
    with no_grad():
        for i in range(0, len(data), batch):
            b = data.take(np.arange(i, min(i + batch, len(data)))).astype(dtype)
            outs.append(model_forward(model_cfg, params, b.target, b.keys, b.flows, b.fb).data)
    return np.concatenate(outs)


def evaluate(ckpt: Checkpoint, data: SampleArrays, t: int | None = None, batch: int = 16) -> MetricsReport:
    """Metrics of ``ckpt`` on ``data`` using the first ``t`` keyframes."""
    if t is not None:
        data = data.with_keyframes(t)
    params = ckpt.tensors(requires_grad=False)
    pred = predict(ckpt.config, params, data, batch)
    return compute_metrics(pred, data.gt, data.mask)
