import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> 'AdamState':
        return AdamState(self.step, {k: x.copy() for k, x in self.m.items()},
                         {k: x.copy() for k, x in self.v.items()})


@dataclass
class AdamConfig:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-6
    grad_clip: float = 1.0


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: (g * factor).astype(g.dtype, copy=False) for k, g in grads.items()}, norm


def adam_step(tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, config: Optional[AdamConfig] = None) -> float:
    """
    In-place clipped AdamW update of ``tensors``; returns the pre-clip gradient norm.

    Weight decay is decoupled: p <- p * (1 - lr * wd) before the Adam step.
    """
    if grads.keys() != tensors.keys():
        missing = tensors.keys() ^ grads.keys()
        raise ValueError(f"gradients do not match parameters: {sorted(missing)}")
    if not math.isfinite(lr):
        raise FloatingPointError(f"non-finite learning rate {lr!r}")
    for name, g in grads.items():
        if g.shape != tensors[name].shape:
            raise ValueError(f"gradient for '{name}' has shape {g.shape}, parameter {tensors[name].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for '{name}'")
    config = AdamConfig() if config is None else config
    grads, norm = clip_by_global_norm(grads, config.grad_clip)
    beta1, beta2 = config.betas
    state.step += 1
    bias1 = 1.0 - beta1 ** state.step
    bias2 = 1.0 - beta2 ** state.step
    for name, p in tensors.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = np.zeros_like(p) if m is None else m
        v = np.zeros_like(p) if v is None else v
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m.astype(p.dtype, copy=False), v.astype(p.dtype, copy=False)
        p *= p.dtype.type(1.0 - lr * config.weight_decay)
        p -= (lr * (m / bias1) / (np.sqrt(v / bias2) + config.eps)).astype(p.dtype, copy=False)
    return norm


def lr_schedule(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to 0 at ``total_steps``."""
    if warmup_steps < 0 or warmup_steps >= total_steps:
        raise ValueError(f"warmup ({warmup_steps}) must be in [0, total_steps={total_steps})")
    if not (0 <= step <= total_steps):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
