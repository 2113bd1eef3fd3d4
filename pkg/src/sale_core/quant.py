"""Symmetric 4-bit quantization of Q and K.

Codes live in ``[-7, 7]``. Queries get one scale per token; keys get one
scale per key block, so every entry of a (query row, key block) product
shares a single dequantization factor and its maximum can be located on
the integer products directly.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import BlockGrid, ShapeError

QMAX = 7


class Grouping(enum.Enum):
    PER_TOKEN = "per_token"
    PER_KEY_BLOCK = "per_key_block"


@dataclass(frozen=True)
class QuantizedMatrix:
    codes: np.ndarray  # int8, N x d
    scales: np.ndarray  # float32, one per group
    grouping: Grouping
    group_rows: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    def row_scales(self) -> np.ndarray:
        """Scale applying to each row, as float64."""
        idx = np.arange(self.codes.shape[0]) // self.group_rows
        return self.scales.astype(np.float64)[idx]

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.row_scales()[:, None]


def _quantize_groups(x: np.ndarray, group_rows: int, grouping: Grouping) -> QuantizedMatrix:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    n = x.shape[0]
    n_groups = -(-n // group_rows)
    absmax = np.zeros(n_groups, dtype=np.float64)
    np.maximum.at(absmax, np.arange(n) // group_rows, np.abs(x).max(axis=1, initial=0.0))
    scales = (absmax / QMAX).astype(np.float32)
    # subnormal scales are coarse; grow them until no code would need clamping
    short = absmax > (QMAX + 0.5) * scales.astype(np.float64)
    while short.any():
        scales[short] = np.nextafter(scales[short], np.float32(np.inf))
        short = absmax > (QMAX + 0.5) * scales.astype(np.float64)
    scales[absmax == 0] = 1.0
    row_scale = scales.astype(np.float64)[np.arange(n) // group_rows]
    codes = np.clip(np.round(x.astype(np.float64) / row_scale[:, None]), -QMAX, QMAX)
    return QuantizedMatrix(codes.astype(np.int8), scales, grouping, group_rows)


def quantize_q(q: np.ndarray) -> QuantizedMatrix:
    """Per-token quantization: ``scale_r = max|Q[r]| / 7``."""
    return _quantize_groups(q, 1, Grouping.PER_TOKEN)


def quantize_k(k: np.ndarray, grid: BlockGrid) -> QuantizedMatrix:
    """Per-key-block quantization: one scale for each ``b_k x d`` tile."""
    if np.shape(k)[0] != grid.n:
        raise ShapeError(f"K has {np.shape(k)[0]} rows, grid expects {grid.n}")
    return _quantize_groups(k, grid.b_k, Grouping.PER_KEY_BLOCK)


def approx_weight_block(qq: QuantizedMatrix, kq: QuantizedMatrix, i: int, j: int,
                        grid: BlockGrid) -> tuple[np.ndarray, np.ndarray]:
    """Integer products for tile ``(i, j)`` and the per-row dequantization factor.

    ``S_est[r, c] == ints[r, c] * comb[r]`` approximates ``q_r . k_c / sqrt(d)``.
    """
    if qq.grouping is not Grouping.PER_TOKEN or kq.grouping is not Grouping.PER_KEY_BLOCK:
        raise ValueError("expected per-token Q and per-key-block K quantization")
    if kq.group_rows != grid.b_k:
        raise ShapeError(f"K grouped by {kq.group_rows} rows, grid b_k={grid.b_k}")
    rows, cols = grid.q_range(i), grid.k_range(j)
    qc = qq.codes[rows.start:rows.stop].astype(np.int32)
    kc = kq.codes[cols.start:cols.stop].astype(np.int32)
    ints = qc @ kc.T
    d = qq.codes.shape[1]
    comb = (qq.scales[rows.start:rows.stop].astype(np.float64) * float(kq.scales[j])) * (1.0 / np.sqrt(d))
    return ints, comb


def max_then_dequantize(ints, scale: float) -> tuple[float, int]:
    """Dequantize only the largest entry of a segment sharing one positive scale.

    Ties go to the lowest column.
    """
    ints = np.asarray(ints)
    if ints.size == 0:
        raise ValueError("empty segment")
    col = int(np.argmax(ints))
    return float(ints[col]) * scale, col


def pack_nibbles(codes: np.ndarray) -> np.ndarray:
    """Pack int codes in ``[-8, 7]`` two per byte (low nibble first) along the last axis."""
    codes = np.asarray(codes, dtype=np.int8)
    if codes.shape[-1] % 2:
        pad = [(0, 0)] * (codes.ndim - 1) + [(0, 1)]
        codes = np.pad(codes, pad)
    u = (codes & 0x0F).astype(np.uint8)
    return u[..., 0::2] | (u[..., 1::2] << 4)


def unpack_nibbles(packed: np.ndarray, width: int) -> np.ndarray:
    """Inverse of :func:`pack_nibbles`; ``width`` is the original last-axis length."""
    packed = np.asarray(packed, dtype=np.uint8)
    lo = (packed & 0x0F).astype(np.int8)
    hi = (packed >> 4).astype(np.int8)
    out = np.empty(packed.shape[:-1] + (packed.shape[-1] * 2,), dtype=np.int8)
    out[..., 0::2] = lo
    out[..., 1::2] = hi
    out = np.where(out > 7, out - 16, out).astype(np.int8)
    return out[..., :width]
