"""Tracks the two estimation errors as true unstale updates arrive, decides
when to stop inverting, and blends estimated with raw stale updates while the
handover decays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .inversion import l1_distance

MODE_ESTIMATING = "estimating"
MODE_BLENDING = "blending"
MODE_VANILLA = "vanilla"


@dataclass
class SwitchState:
    mode: str = MODE_ESTIMATING
    switch_epoch: int | None = None
    gamma: float = 1.0
    window_len: int = 0
    e1_log: dict = field(default_factory=dict)   # epoch -> mean over stale clients
    e2_log: dict = field(default_factory=dict)
    pair_counts: dict = field(default_factory=dict)


class SwitchController:
    """Single-owner controller driven by the epoch loop.

    e1 is the error of the estimated update, e2 of the raw stale update, both
    against the true unstale update once it arrives; both are unmasked L1 and
    averaged across the stale clients that reported in an epoch. The switch
    latches when the moving average of e1 exceeds that of e2, after which
    gamma decays linearly from 1 to 0 over window_len epochs and the mode
    ends at vanilla for good.
    """

    def __init__(self, smoothing_window: int = 3, window_frac: float = 0.1,
                 enabled: bool = True, force_epoch: int | None = None):
        if smoothing_window < 1:
            raise ValueError("smoothing_window must be >= 1")
        if window_frac < 0:
            raise ValueError("window_frac must be >= 0")
        self.smoothing_window = smoothing_window
        self.window_frac = window_frac
        self.enabled = enabled
        self.force_epoch = force_epoch
        self.state = SwitchState()

    # --- error bookkeeping ---

    def record_pair(self, epoch_t: int, est_delta: np.ndarray, stale_delta: np.ndarray,
                    true_delta: np.ndarray) -> None:
        """Fold one stale client's (estimate, stale, true) triple into the
        epoch averages. Call once per stale client as true updates arrive."""
        e1 = l1_distance(est_delta, true_delta)
        e2 = l1_distance(stale_delta, true_delta)
        st = self.state
        k = st.pair_counts.get(epoch_t, 0)
        st.e1_log[epoch_t] = (st.e1_log.get(epoch_t, 0.0) * k + e1) / (k + 1)
        st.e2_log[epoch_t] = (st.e2_log.get(epoch_t, 0.0) * k + e2) / (k + 1)
        st.pair_counts[epoch_t] = k + 1

    def should_switch(self) -> bool:
        """True when the last smoothing_window logged epochs put the moving
        average of e1 above e2's. Needs at least smoothing_window entries."""
        st = self.state
        epochs = sorted(st.e1_log)
        if len(epochs) < self.smoothing_window:
            return False
        recent = epochs[-self.smoothing_window:]
        e1_avg = float(np.mean([st.e1_log[e] for e in recent]))
        e2_avg = float(np.mean([st.e2_log[e] for e in recent]))
        return e1_avg > e2_avg

    # --- epoch-loop driving ---

    def advance(self, epoch: int) -> None:
        """Apply mode transitions for this epoch (latching, never backward)."""
        st = self.state
        if st.mode == MODE_ESTIMATING and self.enabled:
            trigger = (self.force_epoch is not None and epoch >= self.force_epoch) or \
                      (self.force_epoch is None and self.should_switch())
            if trigger:
                st.mode = MODE_BLENDING
                st.switch_epoch = epoch
                st.window_len = int(round(self.window_frac * epoch))
        if st.mode == MODE_BLENDING:
            st.gamma = self._gamma_at(epoch)
            if st.gamma <= 0.0:
                st.gamma = 0.0
                st.mode = MODE_VANILLA

    def _gamma_at(self, epoch: int) -> float:
        st = self.state
        if st.switch_epoch is None:
            return 1.0
        if st.window_len <= 0:
            return 0.0
        return max(0.0, 1.0 - (epoch - st.switch_epoch) / st.window_len)

    def blended_update(self, est_delta: np.ndarray, stale_delta: np.ndarray) -> np.ndarray:
        """gamma * est + (1 - gamma) * stale, a convex combination."""
        if self.state.mode != MODE_BLENDING:
            raise ValueError("blended_update is only valid in blending mode")
        g = self.state.gamma
        return g * np.asarray(est_delta, dtype=np.float64) \
            + (1.0 - g) * np.asarray(stale_delta, dtype=np.float64)

    @property
    def mode(self) -> str:
        return self.state.mode

    def state_label(self) -> str:
        """CSV value: mode name, with gamma attached while blending."""
        if self.state.mode == MODE_BLENDING:
            return f"{MODE_BLENDING}:{self.state.gamma:.4f}"
        return self.state.mode
