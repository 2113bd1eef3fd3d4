"""Selection pass: choose which attention blocks to compute.

For every query block the sink blocks (sequence start) and the local window
(blocks at and just behind the causal frontier) are evaluated exactly to
obtain a per-row running max ``m`` and exp-sum ``l``. Every remaining fully
past key block is scored from 4-bit products and kept when some row has an
estimate ``s`` with ``exp(s - m) / l >= tau``, tested in log form as
``s >= m + ln(tau * l)``. Kept decisions are then OR-ed over segments of
``segment_size`` consecutive middle blocks.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .core import BlockGrid, HeadInput, ShapeError
from .quant import Grouping, QuantizedMatrix

_TINY = np.finfo(np.float64).tiny


@dataclass(frozen=True)
class SelectionConfig:
    tau: float
    b_q: int = 64
    b_k: int = 32
    sink_tokens: int = 32
    local_tokens_min: int = 128
    segment_size: int = 4

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.b_q < 1 or self.b_k < 1:
            raise ValueError("block sizes must be >= 1")
        if self.sink_tokens < 1:
            raise ValueError("sink_tokens must be >= 1")
        if self.local_tokens_min < self.b_k:
            raise ValueError("local_tokens_min must be >= b_k")
        if self.segment_size < 1:
            raise ValueError("segment_size must be >= 1")

    def grid(self, n: int) -> BlockGrid:
        return BlockGrid(n, self.b_q, self.b_k)

    @property
    def sink_blocks(self) -> int:
        return -(-self.sink_tokens // self.b_k)

    @property
    def local_past_blocks(self) -> int:
        """Fully past blocks in the local window, rounded up to whole segments."""
        blocks = -(-self.local_tokens_min // self.b_k)
        return -(-blocks // self.segment_size) * self.segment_size


@dataclass(frozen=True)
class SinkLocalStats:
    m: np.ndarray
    l: np.ndarray


@dataclass(frozen=True)
class BlockMask:
    bits: np.ndarray  # bool, n_q x n_k; True = compute

    @classmethod
    def full(cls, grid: BlockGrid) -> BlockMask:
        return cls(grid.causal_bits())

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def check(self, grid: BlockGrid, config: SelectionConfig | None = None) -> None:
        """Raise if future blocks are set or required blocks are missing."""
        if self.bits.shape != grid.shape:
            raise ShapeError(f"mask shape {self.bits.shape} != grid {grid.shape}")
        causal = grid.causal_bits()
        if np.any(self.bits & ~causal):
            raise ValueError("mask selects a fully-future block")
        for i in range(grid.n_q):
            required = list(range(grid.first_overlap(i), grid.frontier(i) + 1))
            if config is not None:
                required += sink_local_index_set(i, grid, config)
            if not self.bits[i, required].all():
                raise ValueError(f"query block {i} is missing a required block")


def _layout(i: int, grid: BlockGrid, config: SelectionConfig) -> tuple[int, int, int]:
    """(sink block count, local window start, frontier) for query block ``i``."""
    f = grid.frontier(i)
    local_lo = max(0, grid.first_overlap(i) - config.local_past_blocks)
    return min(config.sink_blocks, f + 1), local_lo, f


def sink_local_index_set(i: int, grid: BlockGrid, config: SelectionConfig) -> list[int]:
    """Ascending key-block indices that are always computed for query block ``i``."""
    if not 0 <= i < grid.n_q:
        raise IndexError(f"query block {i} outside [0, {grid.n_q})")
    n_sink, local_lo, f = _layout(i, grid, config)
    return sorted(set(range(n_sink)) | set(range(local_lo, f + 1)))


def middle_range(i: int, grid: BlockGrid, config: SelectionConfig) -> range:
    """Fully past key blocks of query block ``i`` that are scored by estimate."""
    _, local_lo, _ = _layout(i, grid, config)
    return range(config.sink_blocks, max(config.sink_blocks, local_lo))


def compute_sink_local_stats(head: HeadInput, grid: BlockGrid,
                             config: SelectionConfig) -> SinkLocalStats:
    """Exact running max and exp-sum over each query block's sink-local keys.

    The causal mask is not applied inside the sink-local blocks.
    """
    sl_idx, sl_cnt = _sink_local_table(grid, config)
    m, l = kernels.sink_local_stats(head.q.astype(np.float64), head.k.astype(np.float64),
                                    head.scale, grid.b_q, grid.b_k, sl_idx, sl_cnt)
    return SinkLocalStats(m, l)


def _sink_local_table(grid: BlockGrid, config: SelectionConfig):
    sets = [sink_local_index_set(i, grid, config) for i in range(grid.n_q)]
    width = max(len(s) for s in sets)
    sl_idx = np.full((grid.n_q, width), -1, dtype=np.int64)
    sl_cnt = np.zeros(grid.n_q, dtype=np.int64)
    for i, s in enumerate(sets):
        sl_idx[i, : len(s)] = s
        sl_cnt[i] = len(s)
    return sl_idx, sl_cnt


def threshold_bound(tau, stats: SinkLocalStats) -> np.ndarray:
    """Per-row logit bound ``m + ln(tau * l)``; ``s >= bound`` iff ``exp(s - m) / l >= tau``.

    ``tau`` may be a scalar or broadcast against the rows.
    """
    tau = np.asarray(tau, dtype=np.float64)
    if not np.all((tau > 0.0) & (tau < 1.0)):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    return stats.m + np.log(np.maximum(tau * stats.l, _TINY))


def relative_attention_score(s_est, m, l):
    """``exp(s_est - m) / l``; reference form, not used on the hot path."""
    return np.exp(np.asarray(s_est, dtype=np.float64) - m) / l


def segment_aggregate(row: np.ndarray, segment_size: int, start: int = 0,
                      stop: int | None = None) -> np.ndarray:
    """OR decisions over consecutive runs of ``segment_size`` blocks in ``row[start:stop]``.

    A trailing run shorter than ``segment_size`` is forced on.
    """
    if segment_size < 1:
        raise ValueError("segment_size must be >= 1")
    out = np.array(row, dtype=bool, copy=True)
    stop = len(out) if stop is None else stop
    span = out[start:stop]
    n_full = len(span) // segment_size
    if n_full:
        head = span[: n_full * segment_size].reshape(n_full, segment_size)
        head[:] = head.any(axis=1, keepdims=True)
    span[n_full * segment_size:] = True
    return out


@dataclass
class SelectionPlan:
    """Threshold-independent part of the selection pass for one head.

    Calibration and sweeps re-threshold the same plan for many ``tau``.
    """

    grid: BlockGrid
    config: SelectionConfig
    stats: SinkLocalStats
    q_codes: np.ndarray
    k_codes: np.ndarray
    q_scales: np.ndarray
    k_scales: np.ndarray
    scale: float
    mid_lo: np.ndarray
    mid_hi: np.ndarray
    base: np.ndarray = field(repr=False)

    def mask(self, tau: float | None = None) -> BlockMask:
        tau = self.config.tau if tau is None else tau
        bound = threshold_bound(tau, self.stats)
        raw = np.zeros(self.grid.shape, dtype=bool)
        kernels.estimate_middle(self.q_codes, self.k_codes, self.q_scales, self.k_scales,
                                self.scale, bound, self.grid.b_q, self.grid.b_k,
                                self.mid_lo, self.mid_hi, raw)
        bits = self.base.copy()
        seg = self.config.segment_size
        for i in range(self.grid.n_q):
            lo, hi = self.mid_lo[i], self.mid_hi[i]
            if hi > lo:
                bits[i, lo:hi] = segment_aggregate(raw[i, lo:hi], seg)
        return BlockMask(bits)


def plan_selection(head: HeadInput, qq: QuantizedMatrix, kq: QuantizedMatrix,
                   config: SelectionConfig) -> SelectionPlan:
    grid = config.grid(head.n)
    if qq.shape != head.q.shape or kq.shape != head.k.shape:
        raise ShapeError("quantized matrices do not match the head's Q/K shapes")
    if qq.grouping is not Grouping.PER_TOKEN or kq.grouping is not Grouping.PER_KEY_BLOCK:
        raise ValueError("expected per-token Q and per-key-block K quantization")
    if kq.group_rows != grid.b_k:
        raise ShapeError(f"K grouped by {kq.group_rows} rows, config b_k={grid.b_k}")
    stats = compute_sink_local_stats(head, grid, config)
    base = np.zeros(grid.shape, dtype=bool)
    mid_lo = np.zeros(grid.n_q, dtype=np.int64)
    mid_hi = np.zeros(grid.n_q, dtype=np.int64)
    for i in range(grid.n_q):
        base[i, sink_local_index_set(i, grid, config)] = True
        mid = middle_range(i, grid, config)
        mid_lo[i], mid_hi[i] = mid.start, mid.stop
    return SelectionPlan(
        grid=grid,
        config=config,
        stats=stats,
        q_codes=qq.codes.astype(np.int32),
        k_codes=kq.codes.astype(np.int32),
        q_scales=qq.scales.astype(np.float64),
        k_scales=kq.scales.astype(np.float64),
        scale=1.0 / math.sqrt(head.d),
        mid_lo=mid_lo,
        mid_hi=mid_hi,
        base=base,
    )


def selection_pass(head: HeadInput, qq: QuantizedMatrix, kq: QuantizedMatrix,
                   config: SelectionConfig) -> BlockMask:
    return plan_selection(head, qq, kq, config).mask()


# Mask dump: see docs/formats.md for the byte layout.
MASK_MAGIC = b"SMSK"
MASK_VERSION = 1


class MaskFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def rle_encode(bits: np.ndarray) -> list[int]:
    """Run lengths of the row-major flattening, alternating and starting with False."""
    flat = np.asarray(bits, dtype=bool).ravel()
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return runs


def rle_decode(runs: list[int], shape: tuple[int, int]) -> np.ndarray:
    flat = np.zeros(shape[0] * shape[1], dtype=bool)
    pos, val = 0, False
    for r in runs:
        flat[pos:pos + r] = val
        pos += r
        val = not val
    if pos != flat.size:
        raise ValueError(f"runs cover {pos} cells, grid has {flat.size}")
    return flat.reshape(shape)


def write_mask_dump(path, records: list[tuple[int, float, BlockMask]]) -> None:
    """Write ``(head index, tau, mask)`` records."""
    out = bytearray(MASK_MAGIC + struct.pack("<II", MASK_VERSION, len(records)))
    for head, tau, mask in records:
        n_q, n_k = mask.shape
        runs = rle_encode(mask.bits)
        out += struct.pack("<IIIdI", head, n_q, n_k, tau, len(runs))
        out += struct.pack(f"<{len(runs)}I", *runs)
    Path(path).write_bytes(bytes(out))


def read_mask_dump(path) -> list[tuple[int, float, BlockMask]]:
    data = Path(path).read_bytes()
    if data[:4] != MASK_MAGIC:
        raise MaskFileError(f"bad magic {data[:4]!r}", 0)
    if len(data) < 12:
        raise MaskFileError("truncated header", len(data))
    version, count = struct.unpack_from("<II", data, 4)
    if version != MASK_VERSION:
        raise MaskFileError(f"unsupported version {version}", 4)
    pos, records = 12, []
    rec = struct.Struct("<IIIdI")
    for _ in range(count):
        if pos + rec.size > len(data):
            raise MaskFileError("truncated record header", pos)
        head, n_q, n_k, tau, n_runs = rec.unpack_from(data, pos)
        pos += rec.size
        if pos + 4 * n_runs > len(data):
            raise MaskFileError("truncated run list", pos)
        runs = list(struct.unpack_from(f"<{n_runs}I", data, pos))
        try:
            bits = rle_decode(runs, (n_q, n_k))
        except ValueError as exc:
            raise MaskFileError(str(exc), pos) from None
        pos += 4 * n_runs
        records.append((head, tau, BlockMask(bits)))
    if pos != len(data):
        raise MaskFileError("trailing bytes after last record", pos)
    return records
