"""SGD-with-momentum and AdamW over named parameters, plus the LR schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerConfig:
    kind: str = "adamw"  # "sgd-momentum" | "adamw"
    lr: float = 1e-3
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "warmup_cosine"  # "constant" | "warmup_cosine"
    warmup_steps: int = 0
    total_steps: int = 1
    grad_clip: float | None = None

    def __post_init__(self):
        if self.kind not in ("sgd-momentum", "adamw"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.schedule not in ("constant", "warmup_cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


def learning_rate(cfg: OptimizerConfig, step: int) -> float:
    """Learning rate used for update number ``step`` (1-based; step 0 is the start)."""
    if cfg.schedule == "constant":
        return cfg.lr
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    progress = min(max(step - cfg.warmup_steps, 0) / span, 1.0)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    config: OptimizerConfig
    step: int = 0
    # name -> buffer; created lazily only for parameters that are actually updated
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """Pure update: returns new parameter arrays and a new state.

    Only names present in ``grads`` are updated; everything else is returned
    untouched and gets no optimizer state.
    """
    cfg = state.config
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name}; step rejected")

    if cfg.grad_clip is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > cfg.grad_clip:
            grads = {k: g * (cfg.grad_clip / total) for k, g in grads.items()}

    step = state.step + 1
    lr = learning_rate(cfg, step)
    new_params = dict(params)
    moments = dict(state.moments)
    second = dict(state.second)
    for name, g in grads.items():
        p = params[name]
        if cfg.kind == "sgd-momentum":
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p
            v = cfg.momentum * moments.get(name, np.zeros_like(p)) + g
            moments[name] = v
            new_params[name] = p - lr * v
        else:
            m = cfg.beta1 * moments.get(name, np.zeros_like(p)) + (1 - cfg.beta1) * g
            s = cfg.beta2 * second.get(name, np.zeros_like(p)) + (1 - cfg.beta2) * g * g
            moments[name], second[name] = m, s
            mhat = m / (1 - cfg.beta1**step)
            shat = s / (1 - cfg.beta2**step)
            new_params[name] = p - lr * (mhat / (np.sqrt(shat) + cfg.eps) + cfg.weight_decay * p)
    return new_params, OptimizerState(cfg, step, moments, second)


class Optimizer:
    """Stateful wrapper applying :func:`optimizer_step` to live tensors in place."""

    def __init__(self, named_params: dict[str, Tensor], config: OptimizerConfig):
        self.params = named_params
        self.state = OptimizerState(config)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> float:
        trainable = {n: p for n, p in self.params.items() if p.requires_grad}
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in trainable.items()}
        arrays = {n: p.data for n, p in trainable.items()}
        new, self.state = optimizer_step(arrays, grads, self.state)
        for n, p in trainable.items():
            p.data = new[n]
        return learning_rate(self.state.config, self.state.step)
