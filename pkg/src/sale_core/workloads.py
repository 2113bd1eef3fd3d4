"""Synthetic attention workloads and the binary Q/K/V tensor file.

Workload kinds:

``gaussian``
    i.i.d. unit-variance Q, K, V.
``sink_local``
    Channel 0 is reserved for the sink: every query carries 1.0 there and
    only key 0 is non-zero, which adds ``sink_strength`` to the logit of
    token 0 for all rows. The other channels mix white noise with a shared
    AR(1) positional signal so that nearby tokens have logits around
    ``local_strength``, decaying with correlation length ``local_decay``.
``needle``
    ``sink_local`` plus key rows at ``needle_positions`` rewritten so that
    their logit against query ``needle_query`` is ``needle_strength``.
    Token 0 is the sink key already, so a needle there is a no-op.
"""
from __future__ import annotations

import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import HeadInput

GAUSSIAN = "gaussian"
SINK_LOCAL = "sink_local"
NEEDLE = "needle"
KINDS = (GAUSSIAN, SINK_LOCAL, NEEDLE)


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str = GAUSSIAN
    n: int = 1024
    d: int = 64
    heads: int = 1
    seed: int = 0
    sink_strength: float = 12.0
    local_strength: float = 4.0
    local_decay: float = 16.0
    noise: float = 0.7
    needle_positions: tuple[int, ...] = ()
    needle_strength: float = 16.0
    needle_query: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown workload kind {self.kind!r}; expected one of {KINDS}")
        if self.n < 1 or self.d < 1 or self.heads < 1:
            raise ValueError(f"need n, d, heads >= 1, got {self.n}, {self.d}, {self.heads}")
        object.__setattr__(self, "needle_positions", tuple(int(p) for p in self.needle_positions))
        for p in self.needle_positions:
            if not 0 <= p < self.n:
                raise ValueError(f"needle position {p} outside [0, {self.n})")
        if self.needle_query is not None and not 0 <= self.needle_query < self.n:
            raise ValueError(f"needle query {self.needle_query} outside [0, {self.n})")


def gen_gaussian(spec: WorkloadSpec) -> list[HeadInput]:
    rng = np.random.default_rng(spec.seed)
    shape = (spec.n, spec.d)
    return [HeadInput(rng.standard_normal(shape, dtype=np.float32),
                      rng.standard_normal(shape, dtype=np.float32),
                      rng.standard_normal(shape, dtype=np.float32))
            for _ in range(spec.heads)]


def _ar1(rng, n, width, decay):
    rho = math.exp(-1.0 / decay) if decay > 0 else 0.0
    eps = rng.standard_normal((n, width))
    p = np.empty((n, width))
    p[0] = eps[0]
    innov = math.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        p[t] = rho * p[t - 1] + innov * eps[t]
    return p


def _sink_local_head(rng, spec: WorkloadSpec):
    n, d = spec.n, spec.d
    w = d - 1
    q = np.zeros((n, d))
    k = np.zeros((n, d))
    if w:
        amp = math.sqrt(spec.local_strength * math.sqrt(d) / w)
        pos = _ar1(rng, n, w, spec.local_decay)
        q[:, 1:] = spec.noise * rng.standard_normal((n, w)) + amp * pos
        k[:, 1:] = spec.noise * rng.standard_normal((n, w)) + amp * pos
    q[:, 0] = 1.0
    k[0, 0] = spec.sink_strength * math.sqrt(d)
    v = rng.standard_normal((n, d))
    return q, k, v


def gen_sink_local(spec: WorkloadSpec) -> list[HeadInput]:
    rng = np.random.default_rng(spec.seed)
    return [HeadInput(*_sink_local_head(rng, spec)) for _ in range(spec.heads)]


def gen_needle(spec: WorkloadSpec) -> list[HeadInput]:
    rng = np.random.default_rng(spec.seed)
    target = spec.n - 1 if spec.needle_query is None else spec.needle_query
    out = []
    for _ in range(spec.heads):
        q, k, v = _sink_local_head(rng, spec)
        qt = q[target, 1:].astype(np.float32).astype(np.float64)
        norm2 = float(qt @ qt)
        for p in spec.needle_positions:
            if p == 0 or norm2 == 0.0:
                continue
            k[p, 1:] = spec.needle_strength * math.sqrt(spec.d) * qt / norm2
        out.append(HeadInput(q, k, v))
    return out


def generate(spec: WorkloadSpec) -> list[HeadInput]:
    return {GAUSSIAN: gen_gaussian, SINK_LOCAL: gen_sink_local, NEEDLE: gen_needle}[spec.kind](spec)


def spec_from_dict(data: dict) -> WorkloadSpec:
    names = {f.name for f in dataclasses.fields(WorkloadSpec)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown workload fields: {sorted(unknown)}")
    return WorkloadSpec(**data)


# Tensor file: see docs/formats.md for the byte layout.
TENSOR_MAGIC = b"SQKV"
TENSOR_VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sIIIII")


class TensorFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def write_tensor_file(path, heads: Sequence[HeadInput]) -> None:
    if not heads:
        raise ValueError("need at least one head")
    n, d = heads[0].q.shape
    if any(h.q.shape != (n, d) for h in heads):
        raise ValueError("all heads must share N and d")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(TENSOR_MAGIC, TENSOR_VERSION, DTYPE_F32, n, d, len(heads)))
        for h in heads:
            for m in (h.q, h.k, h.v):
                f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_tensor_file(path) -> list[HeadInput]:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != TENSOR_MAGIC:
        raise TensorFileError(f"bad magic {data[:4]!r}, expected {TENSOR_MAGIC!r}", 0)
    if len(data) < _HEADER.size:
        raise TensorFileError("truncated header", len(data))
    _, version, dtype, n, d, heads = _HEADER.unpack_from(data)
    if version != TENSOR_VERSION:
        raise TensorFileError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise TensorFileError(f"unsupported dtype tag {dtype}", 8)
    if n < 1 or d < 1 or heads < 1:
        raise TensorFileError(f"invalid dimensions N={n}, d={d}, heads={heads}", 12)
    expected = _HEADER.size + 3 * heads * n * d * 4
    if len(data) != expected:
        what = "truncated payload" if len(data) < expected else "trailing bytes after payload"
        raise TensorFileError(f"{what}: header implies {expected} bytes, file has {len(data)}",
                              min(len(data), expected))
    flat = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(heads, 3, n, d)
    return [HeadInput(*(flat[h, i].astype(np.float32) for i in range(3))) for h in range(heads)]
