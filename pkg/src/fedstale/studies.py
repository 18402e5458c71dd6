"""Estimation-error studies: how first-order compensation and gradient
inversion degrade with staleness, measured against the true unstale update on
a frozen training trajectory. Used by the acceptance suite and the scripts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import FirstOrderParams, first_order_compensate
from .config import ExperimentConfig
from .inversion import GIConfig, estimate_unstale, invert, l1_distance
from .nn import ParamVector
from .sim import ModelUpdate, _client_delta, _sub_seed, build_world
from .uniqueness import cosine_distance


@dataclass
class ErrorPoint:
    staleness: int
    fo_cos: float
    fo_l1: float
    gi_cos: float | None = None
    gi_l1: float | None = None
    gi_iters: int | None = None


@dataclass
class ErrorStudy:
    seed: int
    anchor_epoch: int
    points: list[ErrorPoint] = field(default_factory=list)


def run_error_study(config: ExperimentConfig, seed: int, staleness_levels=(5, 10, 20, 50),
                    anchor_epoch: int | None = None, with_gi: bool = False,
                    gi_cfg: GIConfig | None = None) -> ErrorStudy:
    """Train a no-staleness trajectory, then compare compensation methods.

    The client under study is the one holding the most target-class samples.
    For each staleness tau: the stale update comes from the snapshot tau
    epochs before the anchor; the true update from the anchor snapshot; the
    first-order estimate (and optionally the inversion-based estimate) is
    scored against the true update in cosine distance and mean L1.
    """
    anchor = anchor_epoch if anchor_epoch is not None else max(staleness_levels) + 10
    partitions, _, _, arch, w0 = build_world(config, seed)
    counts = [int(np.sum(p.hard_labels() == config.staleness.target_class))
              for p in partitions]
    client = int(np.argmax(counts))
    data = partitions[client]

    # frozen trajectory: every client participates fresh each epoch
    snaps = [w0.values.copy()]
    weights = w0
    for t in range(anchor):
        updates = []
        for i, part in enumerate(partitions):
            delta = _client_delta(weights, part, config.opt, _sub_seed(seed, 0x05, i, t))
            updates.append((part.n, delta))
        total = sum(n for n, _ in updates)
        agg = sum(n * d for n, d in updates) / total
        weights = ParamVector(weights.values + agg, arch)
        snaps.append(weights.values.copy())

    w_now = ParamVector(snaps[anchor].copy(), arch)
    true_delta = _client_delta(w_now, data, config.opt, _sub_seed(seed, 0x05, client, anchor))

    study = ErrorStudy(seed=seed, anchor_epoch=anchor)
    gi_cfg = gi_cfg or GIConfig(max_iters=2000, stop_tol=2e-4, sparsification_rate=0.0)
    d_rec_size = max(1, int(round(gi_cfg.d_rec_fraction
                                  * float(np.median([p.n for p in partitions])))))
    for tau in staleness_levels:
        base_epoch = anchor - tau
        if base_epoch < 0:
            raise ValueError(f"anchor epoch {anchor} too small for staleness {tau}")
        w_base = ParamVector(snaps[base_epoch].copy(), arch)
        stale_delta = _client_delta(w_base, data, config.opt,
                                    _sub_seed(seed, 0x05, client, base_epoch))
        fo = first_order_compensate(stale_delta, w_now.values, w_base.values,
                                    config.first_order)
        point = ErrorPoint(
            staleness=tau,
            fo_cos=cosine_distance(fo, true_delta),
            fo_l1=l1_distance(fo, true_delta))
        if with_gi:
            upd = ModelUpdate(client, base_epoch, anchor, stale_delta, data.n)
            gi = invert(upd, w_base, config.opt, gi_cfg, d_rec_size=d_rec_size,
                        seed=_sub_seed(seed, 0x07, client, tau))
            est = estimate_unstale(w_now, gi.d_rec, config.opt)
            point.gi_cos = cosine_distance(est, true_delta)
            point.gi_l1 = l1_distance(est, true_delta)
            point.gi_iters = gi.iters_used
        study.points.append(point)
    return study


def study_rows(study: ErrorStudy) -> list[str]:
    """CSV lines (with header) for one study."""
    rows = ["seed,anchor_epoch,staleness,fo_cos,fo_l1,gi_cos,gi_l1,gi_iters"]
    for p in study.points:
        gi_cos = "" if p.gi_cos is None else f"{p.gi_cos:.8g}"
        gi_l1 = "" if p.gi_l1 is None else f"{p.gi_l1:.8g}"
        gi_iters = "" if p.gi_iters is None else str(p.gi_iters)
        rows.append(f"{study.seed},{study.anchor_epoch},{p.staleness},"
                    f"{p.fo_cos:.8g},{p.fo_l1:.8g},{gi_cos},{gi_l1},{gi_iters}")
    return rows
