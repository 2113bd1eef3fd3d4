"""Tensor types, block geometry and exact causal attention.

Dense matrices are plain 2-D ``float32`` numpy arrays. Every stage that
accumulates (softmax statistics, weighted sums) does so in ``float64`` and
returns ``float32``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when matrix shapes are inconsistent."""


def as_dense(x, name: str = "matrix") -> np.ndarray:
    """Validate and freeze a row-major float32 matrix."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if arr is x:
        arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class HeadInput:
    """Q, K, V for a single attention head, each ``N x d``."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = as_dense(self.q, "Q")
        k = as_dense(self.k, "K")
        v = as_dense(self.v, "V")
        if not (q.shape == k.shape == v.shape):
            raise ShapeError(f"Q, K, V shapes differ: {q.shape}, {k.shape}, {v.shape}")
        if q.shape[0] < 1 or q.shape[1] < 1:
            raise ShapeError(f"need N >= 1 and d >= 1, got {q.shape}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def d(self) -> int:
        return self.q.shape[1]

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.d)


def block_partition(n: int, b: int) -> list[range]:
    """Split ``[0, n)`` into contiguous ranges of length ``b`` (last may be shorter)."""
    if n < 1 or b < 1:
        raise ValueError(f"need n >= 1 and b >= 1, got n={n}, b={b}")
    return [range(s, min(s + b, n)) for s in range(0, n, b)]


class CausalClass(enum.Enum):
    FULLY_PAST = "fully_past"
    OVERLAPPING = "overlapping"
    FULLY_FUTURE = "fully_future"


@dataclass(frozen=True)
class BlockGrid:
    """Query/key tiling of an ``N x N`` attention map."""

    n: int
    b_q: int
    b_k: int

    def __post_init__(self):
        if self.n < 1 or self.b_q < 1 or self.b_k < 1:
            raise ValueError(f"invalid grid n={self.n}, b_q={self.b_q}, b_k={self.b_k}")

    @property
    def n_q(self) -> int:
        return -(-self.n // self.b_q)

    @property
    def n_k(self) -> int:
        return -(-self.n // self.b_k)

    @property
    def last_q_size(self) -> int:
        return self.n - (self.n_q - 1) * self.b_q

    @property
    def last_k_size(self) -> int:
        return self.n - (self.n_k - 1) * self.b_k

    @property
    def shape(self) -> tuple[int, int]:
        return self.n_q, self.n_k

    def q_range(self, i: int) -> range:
        return range(i * self.b_q, min((i + 1) * self.b_q, self.n))

    def k_range(self, j: int) -> range:
        return range(j * self.b_k, min((j + 1) * self.b_k, self.n))

    def frontier(self, i: int) -> int:
        """Last key block that holds any token visible to query block ``i``."""
        return self.q_range(i)[-1] // self.b_k

    def first_overlap(self, i: int) -> int:
        """First key block that is not fully in the past of query block ``i``."""
        return self.q_range(i)[0] // self.b_k

    def classify(self, i: int, j: int) -> CausalClass:
        return causal_block_class(i, j, self)

    def causal_bits(self) -> np.ndarray:
        """Boolean ``n_q x n_k`` grid, true for every block that is not fully future."""
        bits = np.zeros(self.shape, dtype=bool)
        for i in range(self.n_q):
            bits[i, : self.frontier(i) + 1] = True
        return bits


def causal_block_class(i: int, j: int, grid: BlockGrid) -> CausalClass:
    if not (0 <= i < grid.n_q and 0 <= j < grid.n_k):
        raise IndexError(f"block ({i}, {j}) outside grid {grid.shape}")
    qr, kr = grid.q_range(i), grid.k_range(j)
    if kr[-1] < qr[0]:
        return CausalClass.FULLY_PAST
    if kr[0] > qr[-1]:
        return CausalClass.FULLY_FUTURE
    return CausalClass.OVERLAPPING


def full_attention(head: HeadInput) -> np.ndarray:
    """Exact causal softmax attention, ``N x d`` float32."""
    q = head.q.astype(np.float64)
    k = head.k.astype(np.float64)
    v = head.v.astype(np.float64)
    return kernels.dense_attention(q, k, v, head.scale).astype(np.float32)
