import logging
from dataclasses import dataclass, replace, field
from typing import Union

import numpy as np

logger = logging.getLogger(__package__)

ArrayLike = Union[np.ndarray, float]

MIN_BITS, MAX_BITS = 2, 16


def qmax(bits: int) -> int:
    """Largest representable magnitude of a symmetric ``bits``-wide integer."""
    return (1 << (bits - 1)) - 1


def _check_bits(bits: int):
    if not (MIN_BITS <= bits <= MAX_BITS):
        raise ValueError(f"bit-width must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")


def _check_finite(x: np.ndarray, what: str = "input"):
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"{what} contains non-finite entries")


def _maxabs(x: np.ndarray, per_channel: bool) -> np.ndarray:
    x = np.asarray(x)
    if x.size == 0:
        raise ValueError("cannot calibrate on an empty tensor")
    _check_finite(x)
    if per_channel:
        # channels live on the last axis
        return np.max(np.abs(x.reshape(-1, x.shape[-1])), axis=0).astype(np.float64)
    return np.asarray(np.max(np.abs(x)), dtype=np.float64)


@dataclass(frozen=True)
class Quantizer:
    """
    Symmetric max-abs quantizer with clamp range [-(2^(b-1)-1), 2^(b-1)-1].

    ``ema_stat`` is the running max-abs statistic (a scalar, or one entry per channel
    on the last axis). Channels whose statistic is zero are "dead": they quantize and
    dequantize everything to 0 while keeping a placeholder scale of 1.
    """
    bits: int
    ema_stat: np.ndarray = field(repr=False)
    ema_decay: float = 0.99
    frozen: bool = False

    @property
    def per_channel(self) -> bool:
        return np.ndim(self.ema_stat) > 0

    @property
    def qmax(self) -> int:
        return qmax(self.bits)

    @property
    def live(self) -> np.ndarray:
        return self.ema_stat > 0

    @property
    def scale(self) -> np.ndarray:
        stat = np.asarray(self.ema_stat, dtype=np.float64)
        return np.where(stat > 0, self.qmax / np.where(stat > 0, stat, 1.0), 1.0)

    def freeze(self) -> 'Quantizer':
        return self if self.frozen else replace(self, frozen=True)

    def to_dict(self) -> dict:
        return {'bits': self.bits, 'ema_stat': np.asarray(self.ema_stat).tolist(),
                'ema_decay': self.ema_decay, 'frozen': self.frozen}

    @classmethod
    def from_dict(cls, state: dict) -> 'Quantizer':
        return cls(bits=int(state['bits']), ema_stat=np.asarray(state['ema_stat'], dtype=np.float64),
                   ema_decay=float(state['ema_decay']), frozen=bool(state['frozen']))


def calibrate_maxabs(x: np.ndarray, bits: int, per_channel: bool = False, ema_decay: float = 0.99) -> Quantizer:
    _check_bits(bits)
    if not (0.0 < ema_decay < 1.0):
        raise ValueError(f"ema_decay must lie in (0, 1), got {ema_decay}")
    return Quantizer(bits=bits, ema_stat=_maxabs(x, per_channel), ema_decay=ema_decay)


def ema_update(q: Quantizer, x: np.ndarray) -> Quantizer:
    if q.frozen:
        raise RuntimeError("cannot update the statistics of a frozen quantizer")
    stat = _maxabs(x, q.per_channel)
    return replace(q, ema_stat=q.ema_decay * q.ema_stat + (1.0 - q.ema_decay) * stat)


def _broadcast(q: Quantizer, values: np.ndarray):
    scale, live = q.scale, q.live
    if q.per_channel and values.ndim >= 1 and values.shape[-1] != scale.shape[-1]:
        raise ValueError(f"per-channel quantizer has {scale.shape[-1]} channels, "
                         f"tensor has {values.shape[-1]}")
    return scale, live


def quantize(x: ArrayLike, q: Quantizer) -> np.ndarray:
    x = np.asarray(x)
    _check_finite(x)
    scale, live = _broadcast(q, x)
    # np.rint rounds half to even
    qx = np.clip(np.rint(x * scale), -q.qmax, q.qmax)
    return np.where(live, qx, 0).astype(np.int64)


def dequantize(qx: ArrayLike, q: Quantizer) -> np.ndarray:
    qx = np.asarray(qx)
    if np.any(np.abs(qx) > q.qmax):
        raise ValueError(f"quantized values exceed the Int{q.bits} clamp range ±{q.qmax}")
    scale, live = _broadcast(q, qx)
    return np.where(live, qx / scale, 0.0)


def ste_mask(x: ArrayLike, q: Quantizer) -> np.ndarray:
    """Clipped straight-through mask: 1 inside the clamp range, 0 where the value saturates."""
    x = np.asarray(x)
    scale, live = _broadcast(q, x)
    return (np.abs(x * scale) <= q.qmax) & live


def fake_quant(x: ArrayLike, q: Quantizer) -> np.ndarray:
    """Quantize-dequantize round trip, returned in the dtype of ``x``."""
    x = np.asarray(x)
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64
    return dequantize(quantize(x, q), q).astype(dtype, copy=False)


def fake_quant_with_mask(x: np.ndarray, q: Quantizer) -> tuple[np.ndarray, np.ndarray]:
    return fake_quant(x, q), ste_mask(x, q)
