"""Computation pass: exact causal attention over the selected blocks only."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import BlockGrid, HeadInput, ShapeError
from .selection import BlockMask


@dataclass(frozen=True)
class SparseAttentionOutput:
    o: np.ndarray  # float32, N x d
    coverage: np.ndarray  # key tokens attended per row


@dataclass(frozen=True)
class FlopCount:
    computed: int
    skipped: int
    total: int

    @property
    def sparsity(self) -> float:
        return self.skipped / self.total if self.total else 0.0


def block_sparse_attention(head: HeadInput, mask: BlockMask, grid: BlockGrid) -> SparseAttentionOutput:
    """Streaming-softmax attention restricted to ``mask``.

    Key blocks are visited in ascending order. Bits on fully-future blocks
    are ignored; inside diagonal blocks the token-level causal mask applies.
    """
    if grid.n != head.n:
        raise ShapeError(f"grid covers {grid.n} tokens, input has {head.n}")
    if mask.shape != grid.shape:
        raise ShapeError(f"mask shape {mask.shape} != grid {grid.shape}")
    bits = np.ascontiguousarray(mask.bits, dtype=np.bool_)
    o, cov = kernels.sparse_attention(head.q.astype(np.float64), head.k.astype(np.float64),
                                      head.v.astype(np.float64), bits, grid.b_q, grid.b_k,
                                      head.scale)
    empty = np.flatnonzero(cov == 0)
    if empty.size:
        raise ValueError(f"query row {int(empty[0])} has no attendable key tokens under this mask")
    return SparseAttentionOutput(o.astype(np.float32), cov)


def flop_accounting(mask: BlockMask, grid: BlockGrid) -> FlopCount:
    """Count computed vs skipped blocks among the causal (non-future) blocks."""
    causal = grid.causal_bits()
    total = int(causal.sum())
    computed = int((mask.bits & causal).sum())
    return FlopCount(computed, total - computed, total)
