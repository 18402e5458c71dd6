"""Comparison strategies for stale updates: sigmoid staleness weighting,
first-order Taylor compensation, future-weight prediction, and the two-tier
asynchronous combine. All operate on flat update vectors."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import ConfigError


@dataclass(frozen=True)
class WeightingParams:
    a: float = 0.25
    b: float = 10.0

    def __post_init__(self):
        if self.a <= 0:
            raise ConfigError("weighting parameter a must be > 0")


@dataclass(frozen=True)
class FirstOrderParams:
    lam: float = 0.3

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")


def staleness_weight(tau: float, params: WeightingParams = WeightingParams()) -> float:
    """1 / (1 + e^{a(tau - b)}); strictly decreasing in tau, in (0, 1)."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    z = params.a * (tau - params.b)
    # guard the exp against overflow for huge staleness
    if z > 700:
        return math.exp(-z)
    return 1.0 / (1.0 + math.exp(z))


def first_order_compensate(stale_delta: np.ndarray, w_now: np.ndarray,
                           w_base: np.ndarray,
                           params: FirstOrderParams = FirstOrderParams()) -> np.ndarray:
    """g + lam * (g ⊙ g) ⊙ (w_now - w_base), treating the stale delta as the
    pseudo-gradient g at the base snapshot. Identity when w_now == w_base or
    lam == 0."""
    stale_delta = np.asarray(stale_delta, dtype=np.float64)
    w_now = np.asarray(w_now, dtype=np.float64)
    w_base = np.asarray(w_base, dtype=np.float64)
    if not (stale_delta.shape == w_now.shape == w_base.shape):
        raise ValueError("first_order_compensate: vector length mismatch")
    # w_now == w_base or lam == 0 zero the correction term exactly, so both
    # identity invariants hold bit-for-bit without special-casing.
    return stale_delta + params.lam * stale_delta * stale_delta * (w_now - w_base)


def w_pred_compensate(stale_delta: np.ndarray, global_history: list[np.ndarray],
                      tau_assumed: int,
                      params: FirstOrderParams = FirstOrderParams()) -> np.ndarray:
    """First-order compensation toward a predicted global model.

    The prediction extrapolates linearly from the base snapshot by
    tau_assumed times the mean of the last min(tau, 5) global deltas. With
    too little history for both the base snapshot and one trend delta, falls
    back to compensating toward the latest snapshot.
    """
    if tau_assumed < 0:
        raise ValueError("tau_assumed must be >= 0")
    if len(global_history) < 1:
        raise ValueError("empty global history")
    w_latest = np.asarray(global_history[-1], dtype=np.float64)
    if tau_assumed == 0:
        return np.asarray(stale_delta, dtype=np.float64).copy()
    base_pos = len(global_history) - 1 - tau_assumed
    if base_pos < 0:
        # base snapshot unavailable: degrade to plain first-order vs latest
        return first_order_compensate(stale_delta, w_latest, w_latest, params)
    w_base = np.asarray(global_history[base_pos], dtype=np.float64)
    window = min(tau_assumed, 5)
    if len(global_history) < window + 1:
        return first_order_compensate(stale_delta, w_latest, w_base, params)
    recent = [np.asarray(global_history[-i], dtype=np.float64)
              - np.asarray(global_history[-i - 1], dtype=np.float64)
              for i in range(1, window + 1)]
    trend = np.mean(recent, axis=0)
    w_pred = w_base + tau_assumed * trend
    return first_order_compensate(stale_delta, w_pred, w_base, params)


def asyn_tiers_combine(tier_aggregates: list[tuple[np.ndarray, int]]) -> np.ndarray:
    """Cross-tier combination weighted by tier client counts.

    Each entry is (tier FedAvg aggregate, number of clients in the tier);
    tiers without an aggregate this epoch are simply not passed in.
    """
    live = [(np.asarray(d, dtype=np.float64), int(n)) for d, n in tier_aggregates
            if d is not None and n > 0]
    if not live:
        raise ValueError("no tier has an aggregate to combine")
    total = sum(n for _, n in live)
    out = np.zeros_like(live[0][0])
    for d, n in live:
        out += n * d
    return out / total
