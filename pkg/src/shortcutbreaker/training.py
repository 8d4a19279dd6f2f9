"""Hard-mining cosine loss, AdamW/AMSGrad with update clipping, cosine schedule."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Mapping, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .exceptions import ConfigError, ContractError, NumericError
from .model import ModelConfig, model_forward, parameter_init, save_checkpoint
from .rng import make_rng
from .synthetic import TokenBatch

CONFIG_VERSION = 1
LOG_HEADER = ("step", "lr", "loss", "mean_normal_distance")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    total_steps: int = 5000
    lr_start: float = 2e-3
    lr_end: float = 2e-4
    warmup_steps: int = 100
    hard_mining_keep: float = 0.9
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    amsgrad: bool = True
    clip_update: bool = True
    log_interval: int = 50
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.total_steps < 0:
            problems.append("total_steps: must be >= 0")
        if not 0 <= self.lr_end <= self.lr_start:
            problems.append(f"lr_end: need 0 <= lr_end <= lr_start, got {self.lr_end} > {self.lr_start}")
        if self.warmup_steps < 0 or (self.total_steps and self.warmup_steps > self.total_steps):
            problems.append("warmup_steps: must lie in [0, total_steps]")
        if not 0 < self.hard_mining_keep <= 1:
            problems.append(f"hard_mining_keep: must lie in (0, 1], got {self.hard_mining_keep}")
        if self.weight_decay < 0:
            problems.append("weight_decay: must be >= 0")
        if self.log_interval < 1:
            problems.append("log_interval: must be >= 1")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return dict(asdict(self), version=CONFIG_VERSION)

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        data = dict(data)
        version = data.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"version: expected {CONFIG_VERSION}, got {version}")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"{k}: unknown field" for k in unknown])
        return cls(**data)


@dataclass(frozen=True)
class TrainRecord:
    step: int
    lr: float
    loss: float
    mean_normal_distance: float


def token_distances(recon: Tensor, target: Tensor) -> Tensor:
    """Per-token ``1 - cos`` of shape ``[B, N]``."""
    return 1.0 - ad.cosine_similarity(recon, target)


def hard_mining_cosine_loss(recon: Tensor, target: Tensor, keep: float = 0.9) -> Tensor:
    """Mean ``1 - cos`` over the hardest ``keep`` fraction of all tokens in the batch.

    The easiest tokens are pooled globally across the batch; they contribute
    neither value nor gradient.
    """
    if not 0 < keep <= 1:
        raise ConfigError(f"keep must lie in (0, 1], got {keep}")
    dist = token_distances(recon, target)
    flat = dist.data.reshape(-1)
    n_keep = max(1, int(math.ceil(keep * flat.size - 1e-9)))
    if n_keep >= flat.size:
        return ad.mean(dist)
    order = np.argsort(flat, kind="stable")
    weights = np.zeros(flat.size)
    weights[order[flat.size - n_keep:]] = 1.0 / n_keep
    return ad.sum(dist * weights.reshape(dist.shape))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_start``, then cosine decay to ``lr_end``."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_start * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0 or step == cfg.warmup_steps:
        return cfg.lr_start
    if step == cfg.total_steps:
        return cfg.lr_end
    progress = (step - cfg.warmup_steps) / span
    weight = 0.5 * (1.0 + math.cos(math.pi * progress))
    return min(cfg.lr_start, cfg.lr_end + (cfg.lr_start - cfg.lr_end) * weight)


class AdamState:
    """First/second moments and the AMSGrad running maximum, per parameter."""

    def __init__(self, params: Mapping[str, Tensor]):
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v_max = {k: np.zeros_like(p.data) for k, p in params.items()}


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
                   cfg: TrainConfig, lr: float) -> None:
    """One AdamW step with optional AMSGrad and elementwise update clipping.

    The AMSGrad maximum is taken over bias-corrected second moments, so the
    denominator never decreases. Updates are clipped to ``[-lr, lr]``.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    t = state.t
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        v_hat = v / c2
        if cfg.amsgrad:
            v_hat = state.v_max[name] = np.maximum(state.v_max[name], v_hat)
        update = lr * (m / c1) / (np.sqrt(v_hat) + cfg.eps)
        if cfg.clip_update:
            update = np.clip(update, -lr, lr)
        data = p.data
        if cfg.weight_decay:
            data = data * (1.0 - lr * cfg.weight_decay)
        p.data = data - update


def _normal_pool(dataset) -> TokenBatch:
    batches = dataset if isinstance(dataset, (list, tuple)) else [dataset]
    pool = TokenBatch.concatenate(list(batches))
    if pool.anomaly_mask.any():
        raise ContractError("training data must contain normal samples only")
    return pool


def train(model_cfg: ModelConfig, dataset, cfg: TrainConfig,
          params: Optional[dict[str, Tensor]] = None,
          checkpoint_dir: Optional[Path] = None,
          callback: Optional[Callable[[int, float], None]] = None):
    """Fit decoder and bottleneck parameters on normal data.

    Returns ``(params, log)`` where ``log`` is a list of :class:`TrainRecord`.
    Minibatch ``s`` is drawn from the stream ``(seed, "batch", s)`` and the
    forward noise from ``(seed, "noise", s)``, so runs replay exactly.
    """
    pool = _normal_pool(dataset)
    if params is None:
        params = parameter_init(model_cfg, cfg.seed)
    log: list[TrainRecord] = []
    if cfg.total_steps == 0:
        return params, log
    state = AdamState(params)
    names = list(params)
    running, running_dist, count = 0.0, 0.0, 0
    for step in range(1, cfg.total_steps + 1):
        idx = make_rng(cfg.seed, "batch", step).integers(0, len(pool), size=cfg.batch_size)
        layers = [l[idx] for l in pool.layers]
        for p in params.values():
            p.grad = None
        with Graph():
            out = model_forward(params, layers, pool.grid, model_cfg, True,
                                make_rng(cfg.seed, "noise", step))
            loss = hard_mining_cosine_loss(out["reconstructed"], out["target"], cfg.hard_mining_keep)
            loss.backward()
        dist = float(token_distances(out["reconstructed"].detach(), out["target"]).data.mean())
        lr = lr_at(step, cfg)
        optimizer_step(params, {n: params[n].grad for n in names}, state, cfg, lr)
        running += loss.item()
        running_dist += dist
        count += 1
        if step % cfg.log_interval == 0 or step == cfg.total_steps:
            log.append(TrainRecord(step, lr, running / count, running_dist / count))
            running, running_dist, count = 0.0, 0.0, 0
        if callback is not None:
            callback(step, loss.item())
        if checkpoint_dir is not None and cfg.checkpoint_interval and step % cfg.checkpoint_interval == 0:
            save_checkpoint(Path(checkpoint_dir) / f"step_{step:06d}.sbm", params, model_cfg,
                            {"step": step})
    for p in params.values():
        p.grad = None
    return params, log


def write_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for r in log:
            writer.writerow([r.step, repr(r.lr), repr(r.loss), repr(r.mean_normal_distance)])


def read_log(path) -> list[TrainRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [TrainRecord(int(r["step"]), float(r["lr"]), float(r["loss"]),
                        float(r["mean_normal_distance"])) for r in rows]
