"""Decides whether a stale update carries knowledge absent from the unstale
cohort, by cosine distance against an adaptive cohort threshold."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CohortSnapshot:
    """Unstale update vectors observed at one epoch."""

    epoch: int
    unstale_deltas: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.unstale_deltas)


def cosine_distance(u: np.ndarray, v: np.ndarray) -> float:
    """1 - cos(u, v), in [0, 2]. Zero vectors have no direction."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def adaptive_threshold(cohort: CohortSnapshot) -> float:
    """Mean pairwise cosine distance over all ordered cohort pairs.

    The sum runs over every (j, k) including j == k, whose distance is zero,
    so for |S| members the normalizer is |S|^2.
    """
    s = cohort.size
    if s < 2:
        raise ValueError("adaptive threshold needs at least 2 unstale members")
    total = 0.0
    for j in range(s):
        for k in range(s):
            if j != k:
                total += cosine_distance(cohort.unstale_deltas[j], cohort.unstale_deltas[k])
    return total / (s * s)


def is_unique(stale_delta: np.ndarray, cohort: CohortSnapshot) -> bool:
    """True when the stale update's mean distance to the cohort exceeds the
    adaptive threshold. A cohort of fewer than 2 members cannot calibrate a
    threshold, so everything is treated as unique (with a warning)."""
    if cohort.size < 2:
        warnings.warn(
            "uniqueness detector disabled: cohort has fewer than 2 unstale members",
            stacklevel=2,
        )
        return True
    mean_dc = float(np.mean([
        cosine_distance(stale_delta, w) for w in cohort.unstale_deltas
    ]))
    return mean_dc > adaptive_threshold(cohort)


def mean_cohort_distance(stale_delta: np.ndarray, cohort: CohortSnapshot) -> float:
    """Mean cosine distance from a stale update to the cohort (for logging)."""
    return float(np.mean([
        cosine_distance(stale_delta, w) for w in cohort.unstale_deltas
    ]))
