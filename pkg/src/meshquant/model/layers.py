"""
Fake-quantized linear layers with hand-written reverse mode.

Weights are stored transposed, shape (d_in, d_out), so ``y = a @ W + b`` and the
weight quantizer is per output channel (last axis). Activations entering a linear
layer are quantized row-wise: every row belongs to one level, and every
(layer, level) pair owns one scalar quantizer.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal, Optional, NamedTuple

import numpy as np
from scipy.special import erf, expit

from ..mixed_gemm import QuantizedLinear, mp_linear_basic, mp_linear_optimized
from ..quantizer import Quantizer, calibrate_maxabs, ema_update, fake_quant, ste_mask

logger = logging.getLogger(__package__)

Kernel = Literal['simulated', 'basic', 'optimized']
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


@dataclass
class QuantState:
    """Calibration state of one network: weight and per-level activation quantizers."""
    weights: dict[str, Quantizer] = field(default_factory=dict)
    activations: dict[str, dict[int, Quantizer]] = field(default_factory=dict)
    ema_decay: float = 0.99
    frozen: bool = False

    def freeze(self):
        self.weights = {name: q.freeze() for name, q in self.weights.items()}
        self.activations = {name: {b: q.freeze() for b, q in levels.items()}
                            for name, levels in self.activations.items()}
        self.frozen = True

    def to_dict(self) -> dict:
        return {
            'ema_decay': self.ema_decay, 'frozen': self.frozen,
            'weights': {name: q.to_dict() for name, q in self.weights.items()},
            'activations': {name: {str(b): q.to_dict() for b, q in levels.items()}
                            for name, levels in self.activations.items()},
        }

    @classmethod
    def from_dict(cls, state: dict) -> 'QuantState':
        return cls(
            weights={name: Quantizer.from_dict(q) for name, q in state['weights'].items()},
            activations={name: {int(b): Quantizer.from_dict(q) for b, q in levels.items()}
                         for name, levels in state['activations'].items()},
            ema_decay=float(state['ema_decay']), frozen=bool(state['frozen']),
        )


@dataclass
class QuantContext:
    """
    How a forward pass treats quantization.

    ``calibrate`` lets the pass update the quantizer statistics (training before the
    freeze); without it, missing quantizers are calibrated on the fly and discarded so
    the state is never touched.
    """
    enabled: bool = True
    weight_bits: int = 8
    base_bits: int = 4
    calibrate: bool = False
    kernel: Kernel = 'simulated'

    @classmethod
    def full_precision(cls) -> 'QuantContext':
        return cls(enabled=False)


class RowLevels(NamedTuple):
    """Bit-width buckets of the rows fed into a layer."""
    levels: tuple[int, ...]
    buckets: Sequence[np.ndarray]


class LinearCache(NamedTuple):
    a_q: np.ndarray
    w_q: np.ndarray
    a_mask: Optional[np.ndarray]
    w_mask: Optional[np.ndarray]


def _weight_quantizer(name: str, w: np.ndarray, state: QuantState, ctx: QuantContext) -> Quantizer:
    if ctx.calibrate and not state.frozen:
        state.weights[name] = calibrate_maxabs(w, ctx.weight_bits, per_channel=True, ema_decay=state.ema_decay)
    q = state.weights.get(name)
    return q if q is not None else calibrate_maxabs(w, ctx.weight_bits, per_channel=True)


def _act_quantizer(name: str, bits: int, a: np.ndarray, state: QuantState, ctx: QuantContext) -> Quantizer:
    levels = state.activations.setdefault(name, {}) if ctx.calibrate else state.activations.get(name, {})
    q = levels.get(bits)
    if ctx.calibrate and not state.frozen:
        q = calibrate_maxabs(a, bits, ema_decay=state.ema_decay) if q is None else ema_update(q, a)
        levels[bits] = q
    if q is None:
        logger.debug(f"no calibrated Int{bits} quantizer for '{name}', calibrating on the fly")
        q = calibrate_maxabs(a, bits, ema_decay=state.ema_decay)
    return q


def linear_forward(name: str, a: np.ndarray, w: np.ndarray, b: np.ndarray, rows: RowLevels,
                   state: QuantState, ctx: QuantContext) -> tuple[np.ndarray, LinearCache]:
    if not ctx.enabled:
        return a @ w + b, LinearCache(a, w, None, None)
    qw = _weight_quantizer(name, w, state, ctx)
    w_q, w_mask = fake_quant(w, qw), ste_mask(w, qw)
    a_q = np.zeros_like(a)
    a_mask = np.zeros(a.shape, dtype=bool)
    act_quantizers = {}
    for bits, idx in zip(rows.levels, rows.buckets):
        if len(idx) == 0:
            continue
        a_k = a[idx]
        q = act_quantizers[bits] = _act_quantizer(name, bits, a_k, state, ctx)
        a_q[idx] = fake_quant(a_k, q)
        a_mask[idx] = ste_mask(a_k, q)
    if ctx.kernel == 'simulated':
        y = a_q @ w_q + b
    else:
        layer = QuantizedLinear.from_float(w, b, qw, act_quantizers, base_bits=ctx.base_bits)
        kernel = mp_linear_optimized if ctx.kernel == 'optimized' else mp_linear_basic
        y = kernel(a, layer, rows.buckets, rows.levels).astype(a.dtype)
    return y, LinearCache(a_q, w_q, a_mask, w_mask)


def linear_backward(dy: np.ndarray, cache: LinearCache) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (da, dW, db); quantized inputs pass gradients only inside their clamp range."""
    da = dy @ cache.w_q.T
    dw = cache.a_q.T @ dy
    if cache.a_mask is not None:
        da = da * cache.a_mask
        dw = dw * cache.w_mask
    return da, dw, dy.sum(axis=0)


class MLPCache(NamedTuple):
    first: LinearCache
    pre_activation: np.ndarray
    second: LinearCache


def mlp_forward(name: str, x: np.ndarray, params: dict[str, np.ndarray], rows: RowLevels,
                state: QuantState, ctx: QuantContext) -> tuple[np.ndarray, MLPCache]:
    """Linear -> GELU -> Linear, both linears quantized with the same row levels."""
    z, first = linear_forward(f"{name}.0", x, params[f"{name}.0.weight"], params[f"{name}.0.bias"],
                              rows, state, ctx)
    y, second = linear_forward(f"{name}.1", gelu(z), params[f"{name}.1.weight"], params[f"{name}.1.bias"],
                               rows, state, ctx)
    return y, MLPCache(first, z, second)


def mlp_backward(name: str, dy: np.ndarray, cache: MLPCache, grads: dict[str, np.ndarray]) -> np.ndarray:
    dh, grads[f"{name}.1.weight"], grads[f"{name}.1.bias"] = linear_backward(dy, cache.second)
    dz = dh * gelu_grad(cache.pre_activation)
    dx, grads[f"{name}.0.weight"], grads[f"{name}.0.bias"] = linear_backward(dz, cache.first)
    return dx


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(dtype)
    b = rng.uniform(-bound, bound, size=d_out).astype(dtype)
    return w, b


def init_mlp(rng: np.random.Generator, name: str, d_in: int, d_hidden: int, d_out: int,
             dtype=np.float32) -> dict[str, np.ndarray]:
    params = {}
    params[f"{name}.0.weight"], params[f"{name}.0.bias"] = init_linear(rng, d_in, d_hidden, dtype)
    params[f"{name}.1.weight"], params[f"{name}.1.bias"] = init_linear(rng, d_hidden, d_out, dtype)
    return params
