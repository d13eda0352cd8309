"""SGD with momentum and Adam, both with decoupled weight decay, and a
linear-warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from .config import OptimizerConfig, ScheduleConfig


def lr_at(step: int, base_lr: float, sched: ScheduleConfig) -> float:
    """Linear warmup over the first ``warmup`` fraction of steps, then cosine
    decay from ``base_lr`` to ``base_lr * final_lr_ratio``."""
    warm = int(sched.warmup * sched.steps)
    if step < warm:
        return base_lr * (step + 1) / warm
    span = max(sched.steps - warm - 1, 1)
    progress = min((step - warm) / span, 1.0)
    final = base_lr * sched.final_lr_ratio
    return final + (base_lr - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_by_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


class SGDMomentum:
    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} is {g.shape}, parameter is {p.shape}")
            buf = self.buf.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buf[name] = buf
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * buf


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"gradient for {name} is {g.shape}, parameter is {p.shape}")
            m = self.m.get(name, np.zeros_like(p))
            v = self.v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            if self.weight_decay:
                p -= lr * self.weight_decay * p
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: OptimizerConfig):
    if cfg.name == "adam":
        return Adam(cfg.momentum, cfg.beta2, cfg.eps, cfg.weight_decay)
    if cfg.name == "sgd_momentum":
        return SGDMomentum(cfg.momentum, cfg.weight_decay)
    raise ValueError(f"unknown optimizer {cfg.name!r}")


def step_optimizer(params: dict, grads: dict, opt, cfg: OptimizerConfig, lr: float) -> None:
    """Clip (if configured) and apply one update in place."""
    if cfg.grad_clip > 0:
        grads = {k: v.copy() for k, v in grads.items()}
        clip_by_global_norm(grads, cfg.grad_clip)
    opt.step(params, grads, lr)
