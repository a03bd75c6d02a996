"""
Mixed-precision quantized linear layers.

Two implementations of the same layer: one integer GEMM per bucket
(:func:`mp_linear_basic`), and a single GEMM over base-width bit segments
(:func:`mp_linear_optimized`). Both accumulate in int64 and dequantize with the same
per-row factor, so their outputs are equal to the last bit.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Union

import numpy as np

from .quantizer import Quantizer, quantize, qmax

logger = logging.getLogger(__package__)

ACCUMULATOR_BITS = 32


@dataclass
class QuantizedLinear:
    weights_q: np.ndarray  # (d_out, d_in) integers at weight_bits
    weight_scale: np.ndarray  # (d_out,)
    bias: np.ndarray  # (d_out,)
    weight_bits: int
    act_quantizers: dict[int, Quantizer]  # bit-width -> activation quantizer
    base_bits: int = 4

    def __post_init__(self):
        self.weights_q = np.asarray(self.weights_q, dtype=np.int64)
        self.weight_scale = np.broadcast_to(
            np.asarray(self.weight_scale, dtype=np.float64), (self.weights_q.shape[0],))
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if np.any(np.abs(self.weights_q) > qmax(self.weight_bits)):
            raise ValueError(f"weights exceed the Int{self.weight_bits} clamp range")
        if np.any(self.weight_scale <= 0):
            raise ValueError("weight scales must be positive")
        for bits, q in self.act_quantizers.items():
            if bits != q.bits:
                raise ValueError(f"quantizer registered for Int{bits} has bit-width {q.bits}")
            if bits % self.base_bits:
                raise ValueError(f"Int{bits} is not a multiple of the base width {self.base_bits}")

    @property
    def d_in(self) -> int:
        return self.weights_q.shape[1]

    @property
    def d_out(self) -> int:
        return self.weights_q.shape[0]

    @classmethod
    def from_float(cls, weight: np.ndarray, bias: np.ndarray, weight_quantizer: Quantizer,
                   act_quantizers: dict[int, Quantizer], base_bits: int = 4) -> 'QuantizedLinear':
        """Build from a float (d_in, d_out) weight and its per-output-channel quantizer."""
        return cls(weights_q=quantize(weight, weight_quantizer).T,
                   weight_scale=weight_quantizer.scale, bias=bias,
                   weight_bits=weight_quantizer.bits, act_quantizers=act_quantizers, base_bits=base_bits)


def _check_buckets(buckets: Sequence[np.ndarray], n_rows: int):
    for idx in buckets:
        if len(idx) and (np.min(idx) < 0 or np.max(idx) >= n_rows):
            raise IndexError(f"bucket index out of range for {n_rows} rows")


def _check_accumulator(layer: QuantizedLinear, levels: Sequence[int]):
    headroom = ACCUMULATOR_BITS - 1 - max(levels) - layer.weight_bits
    if headroom < 0 or layer.d_in > (1 << headroom):
        raise OverflowError(f"d_in={layer.d_in} may overflow an Int{ACCUMULATOR_BITS} accumulator "
                            f"at Int{max(levels)} x Int{layer.weight_bits}")


def _dequant_factor(act_scale: Union[float, np.ndarray], weight_scale: np.ndarray) -> np.ndarray:
    return 1.0 / (np.float64(act_scale) * weight_scale)


def _level_quantizer(layer: QuantizedLinear, bits: int) -> Quantizer:
    try:
        return layer.act_quantizers[bits]
    except KeyError:
        raise ValueError(f"layer has no activation quantizer for Int{bits}") from None


def mp_linear_basic(a: np.ndarray, layer: QuantizedLinear, buckets: Sequence[np.ndarray],
                    levels: Sequence[int], check_overflow: bool = __debug__) -> np.ndarray:
    """One integer GEMM per bucket, dequantized and placed back at the original rows."""
    a = np.asarray(a)
    _check_buckets(buckets, len(a))
    if check_overflow:
        _check_accumulator(layer, levels)
    y = np.zeros((len(a), layer.d_out), dtype=np.float64)
    for idx, bits in zip(buckets, levels):
        if len(idx) == 0:
            continue
        q = _level_quantizer(layer, bits)
        acc = quantize(a[idx], q) @ layer.weights_q.T
        y[idx] = acc.astype(np.float64) * _dequant_factor(q.scale, layer.weight_scale)
    return y + layer.bias


def encode_segments(q_vals: np.ndarray, bits: int, base_bits: int) -> np.ndarray:
    """
    Split signed ``bits``-wide integers into ``bits // base_bits`` two's-complement segments.

    Returns an array of shape (bits // base_bits, *q_vals.shape). Lower segments are
    unsigned in [0, 2^b0 - 1], the top segment is signed, and
    sum_m seg[m] * 2^(m * b0) reproduces the input exactly.
    """
    if base_bits <= 0 or bits % base_bits:
        raise ValueError(f"base width {base_bits} does not divide {bits}")
    q_vals = np.asarray(q_vals, dtype=np.int64)
    lo, hi = -(1 << (bits - 1)), (1 << (bits - 1)) - 1
    if q_vals.size and (q_vals.min() < lo or q_vals.max() > hi):
        raise ValueError(f"values outside the signed Int{bits} range [{lo}, {hi}]")
    n_seg = bits // base_bits
    mask = (1 << base_bits) - 1
    unsigned = q_vals & ((1 << bits) - 1)
    segments = np.stack([(unsigned >> (m * base_bits)) & mask for m in range(n_seg)])
    top = segments[-1]
    segments[-1] = np.where(top > mask >> 1, top - (1 << base_bits), top)
    return segments


def segment_scales(buckets: Sequence[np.ndarray], levels: Sequence[int], base_bits: int,
                   act_scales: Sequence[float], weight_scale: Union[float, np.ndarray]) -> np.ndarray:
    """
    Scale of every encoded row, in encoding order (level, then segment, then bucket row).

    Row factor is 2^(m * b0) / (s_k * s_W); a scalar ``weight_scale`` gives shape (Ñ,),
    a per-channel one gives (Ñ, d_out).
    """
    weight_scale = np.asarray(weight_scale, dtype=np.float64)
    rows = []
    for idx, bits, s_k in zip(buckets, levels, act_scales):
        if bits % base_bits:
            raise ValueError(f"base width {base_bits} does not divide {bits}")
        base = _dequant_factor(s_k, weight_scale)
        for m in range(bits // base_bits):
            rows.append(np.broadcast_to(base * float(1 << (m * base_bits)), (len(idx),) + weight_scale.shape))
    if not rows:
        return np.empty((0,) + weight_scale.shape)
    return np.concatenate(rows)


@dataclass
class SegmentEncoding:
    segments: np.ndarray  # (Ñ, d_in) base-width integers
    row_index: np.ndarray  # original row of every segment row
    row_level: np.ndarray  # level position of every segment row
    row_segment: np.ndarray  # segment position m of every segment row
    scales: np.ndarray  # (Ñ, d_out)


def encode_activations(a: np.ndarray, layer: QuantizedLinear, buckets: Sequence[np.ndarray],
                       levels: Sequence[int]) -> SegmentEncoding:
    segments, row_index, row_level, row_segment, act_scales = [], [], [], [], []
    for k, (idx, bits) in enumerate(zip(buckets, levels)):
        q = _level_quantizer(layer, bits) if len(idx) else None
        act_scales.append(q.scale if q is not None else 1.0)
        if q is None:
            continue
        encoded = encode_segments(quantize(a[idx], q), bits, layer.base_bits)
        for m, seg in enumerate(encoded):
            segments.append(seg)
            row_index.append(idx)
            row_level.append(np.full(len(idx), k))
            row_segment.append(np.full(len(idx), m))
    if not segments:
        empty = np.empty(0, dtype=np.int64)
        return SegmentEncoding(np.empty((0, layer.d_in), dtype=np.int64), empty, empty, empty,
                               np.empty((0, layer.d_out)))
    return SegmentEncoding(
        segments=np.concatenate(segments), row_index=np.concatenate(row_index).astype(np.int64),
        row_level=np.concatenate(row_level), row_segment=np.concatenate(row_segment),
        scales=segment_scales(buckets, levels, layer.base_bits, act_scales, layer.weight_scale),
    )


def mp_linear_optimized(a: np.ndarray, layer: QuantizedLinear, buckets: Sequence[np.ndarray],
                        levels: Sequence[int], check_overflow: bool = __debug__) -> np.ndarray:
    """
    All buckets in a single base-width integer GEMM.

    Each segment row's scale 2^(m * b0) / (s_k * s_W) is applied in two exact parts:
    the power of two as an integer shift before the scatter-add into the original
    rows, and 1 / (s_k * s_W) once per original row afterwards.
    """
    a = np.asarray(a)
    _check_buckets(buckets, len(a))
    if check_overflow:
        _check_accumulator(layer, levels)
    enc = encode_activations(a, layer, buckets, levels)
    acc = np.zeros((len(a), layer.d_out), dtype=np.int64)
    y = np.zeros((len(a), layer.d_out), dtype=np.float64)
    if len(enc.segments):
        products = enc.segments @ layer.weights_q.T
        shifts = enc.row_segment.astype(np.int64) * layer.base_bits
        np.add.at(acc, enc.row_index, products << shifts[:, None])
        first = np.flatnonzero(enc.row_segment == 0)
        rows = enc.row_index[first]
        y[rows] = acc[rows].astype(np.float64) * enc.scales[first]
    return y + layer.bias

