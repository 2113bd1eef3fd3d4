"""Offline per-head threshold calibration.

Starting from ``tau0`` the threshold is halved until the worst L1 output
error over all calibration samples is at most ``theta``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import HeadInput, ShapeError, full_attention
from .quant import quantize_k, quantize_q
from .selection import SelectionConfig, SelectionPlan, plan_selection
from .sparse_exec import block_sparse_attention, flop_accounting

CONVERGED = "converged"
FLOOR_REACHED = "floor-reached"
PROFILE_VERSION = 1
DEFAULT_TAU0 = 0.008
DEFAULT_THETA = 0.4
DEFAULT_MAX_HALVINGS = 30


def l1_error(o: np.ndarray, o_tilde: np.ndarray) -> float:
    """``sum |O - O~| / N`` with N the number of rows (tokens)."""
    o = np.asarray(o, dtype=np.float64)
    o_tilde = np.asarray(o_tilde, dtype=np.float64)
    if o.shape != o_tilde.shape or o.ndim != 2:
        raise ShapeError(f"output shapes differ: {o.shape} vs {o_tilde.shape}")
    return float(np.abs(o - o_tilde).sum() / o.shape[0])


@dataclass(frozen=True)
class ErrorReport:
    per_sample: tuple[float, ...]

    @property
    def max(self) -> float:
        return max(self.per_sample)


class PreparedSample:
    """Everything about one sample that does not depend on ``tau``."""

    def __init__(self, head: HeadInput, config: SelectionConfig):
        self.head = head
        self.grid = config.grid(head.n)
        self.dense = full_attention(head)
        self.plan: SelectionPlan = plan_selection(head, quantize_q(head.q),
                                                  quantize_k(head.k, self.grid), config)

    def error(self, tau: float) -> float:
        out = block_sparse_attention(self.head, self.plan.mask(tau), self.grid)
        return l1_error(self.dense, out.o)

    def sparsity(self, tau: float) -> float:
        return flop_accounting(self.plan.mask(tau), self.grid).sparsity


def error_report(prepared: Sequence[PreparedSample], tau: float) -> ErrorReport:
    return ErrorReport(tuple(p.error(tau) for p in prepared))


@dataclass(frozen=True)
class HeadCalibration:
    tau: float
    flag: str
    halvings: int
    err: float


def _calibrate_prepared(prepared, theta, tau0, max_halvings) -> HeadCalibration:
    tau, k = tau0, 0
    while True:
        err = error_report(prepared, tau).max
        if err <= theta:
            return HeadCalibration(tau, CONVERGED, k, err)
        if k == max_halvings:
            return HeadCalibration(tau, FLOOR_REACHED, k, err)
        k += 1
        tau = tau0 / 2.0**k


def _check_params(theta, tau0, max_halvings):
    if not theta > 0:
        raise ValueError(f"theta must be > 0, got {theta}")
    if not 0.0 < tau0 < 1.0:
        raise ValueError(f"tau0 must lie in (0, 1), got {tau0}")
    if max_halvings < 0:
        raise ValueError(f"max_halvings must be >= 0, got {max_halvings}")


def calibrate_head(samples: Sequence[HeadInput], theta: float = DEFAULT_THETA,
                   tau0: float = DEFAULT_TAU0, max_halvings: int = DEFAULT_MAX_HALVINGS,
                   config: SelectionConfig | None = None) -> HeadCalibration:
    """Largest ``tau0 / 2**k`` (``k <= max_halvings``) whose worst-sample error is ``<= theta``.

    If no rung qualifies, the floor ``tau0 / 2**max_halvings`` is returned
    flagged ``floor-reached``.
    """
    if not samples:
        raise ValueError("calibrate_head needs at least one sample")
    _check_params(theta, tau0, max_halvings)
    config = dataclasses.replace(config, tau=tau0) if config else SelectionConfig(tau=tau0)
    prepared = [PreparedSample(s, config) for s in samples]
    return _calibrate_prepared(prepared, theta, tau0, max_halvings)


@dataclass
class HeadProfile:
    layer: int
    head: int
    tau: float
    flag: str
    halvings: int
    err: float | None = None


@dataclass
class CalibrationProfile:
    tau0: float
    theta: float
    heads: list[HeadProfile]
    max_halvings: int = DEFAULT_MAX_HALVINGS
    samples: list[str] = field(default_factory=list)
    version: int = PROFILE_VERSION

    def tau_for(self, head: int, layer: int = 0) -> float:
        for h in self.heads:
            if h.head == head and h.layer == layer:
                return h.tau
        raise KeyError(f"no threshold for layer {layer}, head {head}")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "tau0": self.tau0,
            "theta": self.theta,
            "max_halvings": self.max_halvings,
            "samples": list(self.samples),
            "heads": [dataclasses.asdict(h) for h in self.heads],
        }

    @classmethod
    def from_dict(cls, data: dict) -> CalibrationProfile:
        if data.get("version") != PROFILE_VERSION:
            raise ValueError(f"unsupported profile version {data.get('version')!r}")
        try:
            heads = [HeadProfile(int(h["layer"]), int(h["head"]), float(h["tau"]),
                                 str(h["flag"]), int(h["halvings"]), h.get("err"))
                     for h in data["heads"]]
            return cls(float(data["tau0"]), float(data["theta"]), heads,
                       int(data.get("max_halvings", DEFAULT_MAX_HALVINGS)),
                       list(data.get("samples", [])))
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed profile: {exc}") from None

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> CalibrationProfile:
        return cls.from_dict(json.loads(Path(path).read_text()))


def calibrate_model(samples: Sequence[Sequence[HeadInput]], theta: float = DEFAULT_THETA,
                    tau0: float = DEFAULT_TAU0, max_halvings: int = DEFAULT_MAX_HALVINGS,
                    config: SelectionConfig | None = None, layer: int = 0,
                    sample_ids: Sequence[str] | None = None) -> CalibrationProfile:
    """Calibrate each head independently.

    ``samples[s][h]`` is head ``h`` of calibration sample ``s``.
    """
    if not samples:
        raise ValueError("calibrate_model needs at least one sample")
    n_heads = len(samples[0])
    if any(len(s) != n_heads for s in samples):
        raise ShapeError("calibration samples disagree on head count")
    heads = []
    for h in range(n_heads):
        res = calibrate_head([s[h] for s in samples], theta, tau0, max_halvings, config)
        heads.append(HeadProfile(layer, h, res.tau, res.flag, res.halvings, res.err))
    ids = list(sample_ids) if sample_ids is not None else [f"sample-{i}" for i in range(len(samples))]
    return CalibrationProfile(tau0, theta, heads, max_halvings, ids)
