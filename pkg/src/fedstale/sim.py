"""Event-driven semi-asynchronous FL loop.

Unstale clients train on the current snapshot every epoch; each stale client
runs on a fixed cadence (train on the snapshot from round start, deliver tau
epochs later, start the next round immediately), so deliveries land at
multiples of tau. The server handles arrivals with a pluggable strategy and
everything is a deterministic function of (config, method, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .baselines import (FirstOrderParams, WeightingParams, asyn_tiers_combine,
                        first_order_compensate, staleness_weight, w_pred_compensate)
from .data import StalenessPlan, VariationSpec, apply_variation, dirichlet_partition, \
    make_blobs, select_stale_clients
from .inversion import GIConfig, GIResult, estimate_unstale, invert
from .nn import ConfigError, Dataset, ModelArch, OptConfig, ParamVector, forward, \
    init_params, local_update
from .switching import MODE_BLENDING, MODE_VANILLA, SwitchController
from .uniqueness import CohortSnapshot, adaptive_threshold, is_unique, mean_cohort_distance

METHODS = ("unweighted", "weighted", "first_order", "w_pred", "asyn_tiers",
           "ours", "unstale_oracle")

METRICS_CSV_HEADER = ("epoch,method,seed,overall_acc,target_class_acc,"
                      "e1,e2,switch_state,gi_iters,wallclock_ms")
DETECTOR_CSV_HEADER = "epoch,client_id,mean_dc,threshold,unique"


class AggregationError(ValueError):
    """Degenerate aggregation weights."""


class RunAbort(RuntimeError):
    """Training diverged; carries the diagnostic message."""


@dataclass
class ModelUpdate:
    """One uploaded client delta (trained weights minus base snapshot)."""

    client_id: int
    base_epoch: int
    arrival_epoch: int
    delta: np.ndarray
    num_samples: int

    def __post_init__(self):
        self.delta = np.asarray(self.delta, dtype=np.float64)
        if self.arrival_epoch < self.base_epoch:
            raise ValueError("staleness would be negative")
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")

    @property
    def staleness(self) -> int:
        return self.arrival_epoch - self.base_epoch


class SnapshotRing:
    """Keeps the last `capacity` global snapshots, keyed by epoch."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._store: dict[int, np.ndarray] = {}

    def put(self, epoch: int, values: np.ndarray) -> None:
        self._store[epoch] = np.asarray(values, dtype=np.float64).copy()
        stale_keys = sorted(self._store)[:-self.capacity]
        for k in stale_keys:
            del self._store[k]

    def get(self, epoch: int) -> np.ndarray:
        if epoch not in self._store:
            raise KeyError(f"snapshot for epoch {epoch} not retained "
                           f"(have {sorted(self._store)[:3]}..)")
        return self._store[epoch]

    def window(self, first: int, last: int) -> list[np.ndarray]:
        return [self.get(e) for e in range(first, last + 1)]

    def __contains__(self, epoch: int) -> bool:
        return epoch in self._store


@dataclass
class GlobalState:
    epoch: int
    weights: ParamVector
    history: SnapshotRing


@dataclass
class MetricsRecord:
    epoch: int
    method: str
    seed: int
    overall_acc: float | None
    target_class_acc: float | None
    e1: float | None = None
    e2: float | None = None
    switch_state: str = ""
    gi_iters: int | None = None
    wallclock_ms: int | None = None

    def to_csv_row(self) -> str:
        def num(v, fmt):
            return "" if v is None or (isinstance(v, float) and np.isnan(v)) else fmt % v
        return ",".join([
            str(self.epoch), self.method, str(self.seed),
            num(self.overall_acc, "%.6f"), num(self.target_class_acc, "%.6f"),
            num(self.e1, "%.8g"), num(self.e2, "%.8g"),
            self.switch_state,
            "" if self.gi_iters is None else str(self.gi_iters),
            "" if self.wallclock_ms is None else str(self.wallclock_ms),
        ])


@dataclass
class DetectorRecord:
    epoch: int
    client_id: int
    mean_dc: float
    threshold: float
    unique: bool

    def to_csv_row(self) -> str:
        return (f"{self.epoch},{self.client_id},{self.mean_dc:.8g},"
                f"{self.threshold:.8g},{int(self.unique)}")


@dataclass
class RunResult:
    metrics: list = field(default_factory=list)
    detector_rows: list = field(default_factory=list)
    d_rec_dumps: list = field(default_factory=list)  # (epoch, client_id, Dataset)
    aborted: bool = False
    abort_reason: str | None = None
    final_weights: ParamVector | None = None


# --- pure server-side operations ---

def aggregate_fedavg(updates: list[ModelUpdate],
                     extra_weights: list[float] | None = None) -> np.ndarray:
    """Sample-count-weighted mean of deltas, with optional extra multipliers
    (staleness weights); the denominator renormalizes whatever survives."""
    if not updates:
        raise AggregationError("no updates to aggregate")
    if extra_weights is not None and len(extra_weights) != len(updates):
        raise AggregationError("extra_weights length mismatch")
    weights = np.array([
        u.num_samples * (1.0 if extra_weights is None else extra_weights[i])
        for i, u in enumerate(updates)
    ], dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise AggregationError("combined aggregation weights sum to zero")
    out = np.zeros_like(updates[0].delta)
    for w, u in zip(weights, updates):
        out += w * u.delta
    return out / total


def add_gaussian_noise(update: ModelUpdate, variance: float, seed: int = 0) -> ModelUpdate:
    """Client-side privacy noise: i.i.d. N(0, variance) added to the delta."""
    if variance < 0:
        raise ValueError("variance must be >= 0")
    if variance == 0:
        return update
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xB0]))
    noisy = update.delta + rng.normal(0.0, np.sqrt(variance), update.delta.size)
    return ModelUpdate(update.client_id, update.base_epoch, update.arrival_epoch,
                       noisy, update.num_samples)


def evaluate(weights: ParamVector, test: Dataset):
    """(per-class accuracy vector, overall accuracy) on argmax predictions.

    Classes absent from the test set get NaN and drop out of any averaging.
    """
    if test.n < 1:
        raise ValueError("test set must be nonempty")
    if test.is_soft:
        raise ValueError("evaluate needs hard labels")
    logits = forward(weights.arch, weights, test.features)
    pred = np.argmax(logits, axis=1)
    truth = test.hard_labels()
    per_class = np.full(test.num_classes, np.nan)
    for c in range(test.num_classes):
        sel = truth == c
        if sel.any():
            per_class[c] = float(np.mean(pred[sel] == c))
    overall = float(np.mean(pred == truth))
    return per_class, overall


def _sub_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, *tags]).generate_state(1)[0])


# --- the epoch loop ---

def build_world(config, seed: int):
    """Datasets, partitions, staleness plan and initial weights for one run."""
    C, dim = config.data.num_classes, config.data.dim
    spc, test_spc = config.data.samples_per_class, config.data.test_samples_per_class
    data_seed = _sub_seed(seed, 0x01)
    master = make_blobs(C, dim, spc + test_spc, config.data.spread, data_seed)
    train_idx, test_idx = [], []
    for c in range(C):
        start = c * (spc + test_spc)
        train_idx.extend(range(start, start + spc))
        test_idx.extend(range(start + spc, start + spc + test_spc))
    train = master.subset(np.array(train_idx))
    test = master.subset(np.array(test_idx))

    pools = None
    if config.scenario == "variant_data":
        pool_master = make_blobs(C, dim, spc + test_spc, config.variation.pool_spread,
                                 data_seed + 7919)
        pool_train = pool_master.subset(np.array(train_idx))
        pool_test = pool_master.subset(np.array(test_idx))
        # the moving task spans both families, so the fixed test set does too
        test = Dataset(np.vstack([test.features, pool_test.features]),
                       np.concatenate([test.hard_labels(), pool_test.hard_labels()]), C)
        part_spec = config.partition_spec(_sub_seed(seed, 0x02))
        pools = dirichlet_partition(pool_train, part_spec)

    partitions = dirichlet_partition(train, config.partition_spec(_sub_seed(seed, 0x02)))
    arch = ModelArch((dim, *config.model_hidden, C), config.model_activation)
    w0 = init_params(arch, _sub_seed(seed, 0x03))
    return partitions, test, pools, arch, w0


def run_training(config, method: str | None = None, seed: int | None = None, *,
                 partitions: list[Dataset] | None = None,
                 test_set: Dataset | None = None) -> RunResult:
    """Simulate one (method, seed) run and return per-epoch metrics.

    `partitions`/`test_set` override the generated world (used by scenario
    tests); shapes must match the config's data geometry.
    """
    method = method if method is not None else config.methods[0]
    seed = seed if seed is not None else config.seeds[0]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")

    gen_partitions, gen_test, pools, arch, w0 = build_world(config, seed)
    if partitions is None:
        partitions = gen_partitions
    if test_set is None:
        test_set = gen_test

    plan: StalenessPlan = config.staleness
    tau = plan.staleness_epochs
    # zero staleness makes "stale" clients indistinguishable from unstale ones
    staleness_active = tau > 0 and method != "unstale_oracle"
    stale_ids = set(select_stale_clients(partitions, plan)) if staleness_active else set()
    unstale_ids = [i for i in range(len(partitions)) if i not in stale_ids]
    client_sizes = [p.n for p in partitions]
    d_rec_size = max(1, int(round(config.gi.d_rec_fraction
                                  * float(np.median(client_sizes)))))

    opt: OptConfig = config.opt
    fo_params: FirstOrderParams = config.first_order
    weighting: WeightingParams = config.weighting
    gi_cfg: GIConfig = config.gi

    result = RunResult()
    state = GlobalState(0, w0.copy(), SnapshotRing(max(tau, 5) + 8))
    controller = SwitchController(
        smoothing_window=config.switch.smoothing_window,
        window_frac=config.switch.window_frac,
        enabled=config.switch.enabled,
        force_epoch=config.switch.force_epoch)

    current_data = list(partitions)
    var_specs = None
    if config.scenario == "variant_data" and config.variation.rate > 0:
        var_specs = [VariationSpec(config.variation.rate, pools[i],
                                   seed=_sub_seed(seed, 0x04, i))
                     for i in range(len(partitions))]

    # per-round bookkeeping for stale clients
    round_base_epoch = 0
    round_data = {i: current_data[i] for i in stale_ids}
    unstale_delta_log: dict[int, list[np.ndarray]] = {}
    pending_pairs: dict[int, tuple[int, np.ndarray | None, np.ndarray]] = {}
    warm_results: dict[int, GIResult] = {}
    last_stale_tier_agg: np.ndarray | None = None

    timer = _EpochTimer(enabled=config.record_timing)

    for t in range(config.total_epochs):
        timer.start()
        state.epoch = t
        state.history.put(t, state.weights.values)
        w_now = state.weights

        if var_specs is not None:
            current_data = [apply_variation(current_data[i], var_specs[i], t)
                            for i in range(len(current_data))]

        # --- client work ---
        unstale_updates = []
        for i in unstale_ids:
            delta = _client_delta(w_now, current_data[i], opt, _sub_seed(seed, 0x05, i, t))
            upd = ModelUpdate(i, t, t, delta, current_data[i].n)
            if config.noise_variance > 0:
                upd = add_gaussian_noise(upd, config.noise_variance,
                                         _sub_seed(seed, 0x06, i, t))
            unstale_updates.append(upd)
        if method == "ours" and staleness_active:
            unstale_delta_log[t] = [u.delta for u in unstale_updates]
            for e in list(unstale_delta_log):
                if e < t - tau:
                    del unstale_delta_log[e]

        stale_updates = []
        delivery = staleness_active and t > 0 and t % tau == 0
        if delivery:
            base_values = state.history.get(round_base_epoch)
            w_base = ParamVector(base_values.copy(), arch)
            for i in sorted(stale_ids):
                delta = _client_delta(w_base, round_data[i], opt,
                                      _sub_seed(seed, 0x05, i, round_base_epoch))
                upd = ModelUpdate(i, round_base_epoch, t, delta, round_data[i].n)
                if config.noise_variance > 0:
                    upd = add_gaussian_noise(upd, config.noise_variance,
                                             _sub_seed(seed, 0x06, i, round_base_epoch))
                stale_updates.append(upd)

        # --- strategy ---
        gi_iters = 0
        e1_val = e2_val = None
        if method == "ours":
            est_updates, gi_iters, e1_val, e2_val = _handle_ours(
                stale_updates, state, controller, t, tau, unstale_delta_log,
                pending_pairs, warm_results, opt, gi_cfg, d_rec_size, seed,
                config.detector_enabled, config.gi_dump_d_rec, result)
            all_updates = sorted(unstale_updates + est_updates, key=lambda u: u.client_id)
            global_delta = aggregate_fedavg(all_updates) if all_updates else 0.0
        elif method == "asyn_tiers":
            tiers = []
            if unstale_updates:
                tiers.append((aggregate_fedavg(unstale_updates), len(unstale_ids)))
            if delivery and stale_updates:
                last_stale_tier_agg = aggregate_fedavg(stale_updates)
            if last_stale_tier_agg is not None:
                tiers.append((last_stale_tier_agg, len(stale_ids)))
            global_delta = asyn_tiers_combine(tiers) if tiers else 0.0
        else:
            handled = _handle_baseline(method, stale_updates, state, t, tau,
                                       weighting, fo_params)
            all_updates = sorted(unstale_updates + handled["updates"],
                                 key=lambda u: u.client_id)
            extra = None
            if handled["extra"] is not None:
                by_id = handled["extra"]
                extra = [by_id.get(u.client_id, 1.0) for u in all_updates]
            global_delta = aggregate_fedavg(all_updates, extra) if all_updates else 0.0

        new_values = state.weights.values + global_delta
        if not np.all(np.isfinite(new_values)):
            result.aborted = True
            result.abort_reason = (f"non-finite global weights at epoch {t} "
                                   f"(method={method}, seed={seed})")
            result.metrics.append(MetricsRecord(
                epoch=t, method=method, seed=seed, overall_acc=None,
                target_class_acc=None, switch_state="abort",
                gi_iters=gi_iters if method == "ours" else None,
                wallclock_ms=timer.stop()))
            return result
        state.weights = ParamVector(new_values, arch)

        if delivery:
            round_base_epoch = t
            round_data = {i: current_data[i] for i in stale_ids}

        per_class, overall = evaluate(state.weights, test_set)
        result.metrics.append(MetricsRecord(
            epoch=t, method=method, seed=seed, overall_acc=overall,
            target_class_acc=float(per_class[plan.target_class]),
            e1=e1_val, e2=e2_val,
            switch_state=controller.state_label() if method == "ours" else "",
            gi_iters=gi_iters if method == "ours" else None,
            wallclock_ms=timer.stop()))

    result.final_weights = state.weights
    return result


def _client_delta(base: ParamVector, dataset: Dataset, opt: OptConfig, seed: int) -> np.ndarray:
    ref = base if opt.kind == "fedprox" else None
    trained = local_update(base, dataset, opt, global_ref=ref, seed=seed)
    return trained.values - base.values


def _handle_baseline(method, stale_updates, state, t, tau, weighting, fo_params):
    """Compensate or weight this epoch's stale arrivals for the four
    aggregate_fedavg-based baselines."""
    if not stale_updates:
        return {"updates": [], "extra": None}
    w_now = state.weights.values
    if method == "unweighted":
        return {"updates": stale_updates, "extra": None}
    if method == "weighted":
        extra = {u.client_id: staleness_weight(u.staleness, weighting)
                 for u in stale_updates if u.staleness > 0}
        return {"updates": stale_updates, "extra": extra if extra else None}
    if method == "first_order":
        out = []
        for u in stale_updates:
            w_base = state.history.get(u.base_epoch)
            comp = first_order_compensate(u.delta, w_now, w_base, fo_params)
            out.append(ModelUpdate(u.client_id, u.base_epoch, u.arrival_epoch,
                                   comp, u.num_samples))
        return {"updates": out, "extra": None}
    if method == "w_pred":
        first_kept = max(0, t - tau)
        history = state.history.window(first_kept, t)
        out = []
        for u in stale_updates:
            comp = w_pred_compensate(u.delta, history, u.staleness, fo_params)
            out.append(ModelUpdate(u.client_id, u.base_epoch, u.arrival_epoch,
                                   comp, u.num_samples))
        return {"updates": out, "extra": None}
    raise ConfigError(f"unhandled method {method!r}")


def _handle_ours(stale_updates, state, controller, t, tau, unstale_delta_log,
                 pending_pairs, warm_results, opt, gi_cfg, d_rec_size, seed,
                 detector_enabled, dump_d_rec, result):
    """Inversion pipeline for this epoch's stale arrivals.

    Order matters: newly arrived true updates first settle the E1/E2 pairs
    recorded one cadence ago, then the switch state advances, then the
    arrivals are converted according to the (possibly new) mode.
    """
    e1_val = e2_val = None
    if stale_updates:
        recorded_epoch = None
        for u in stale_updates:
            pending = pending_pairs.pop(u.client_id, None)
            if pending is None:
                continue
            est_epoch, est_delta, old_stale_delta = pending
            if est_epoch == u.base_epoch and est_delta is not None:
                controller.record_pair(est_epoch, est_delta, old_stale_delta, u.delta)
                recorded_epoch = est_epoch
        if recorded_epoch is not None:
            e1_val = controller.state.e1_log.get(recorded_epoch)
            e2_val = controller.state.e2_log.get(recorded_epoch)

    controller.advance(t)

    gi_iters = 0
    out = []
    for u in stale_updates:
        if controller.mode == MODE_VANILLA:
            out.append(u)
            pending_pairs.pop(u.client_id, None)
            continue

        unique = True
        if detector_enabled:
            cohort = CohortSnapshot(u.base_epoch, unstale_delta_log.get(u.base_epoch, []))
            if cohort.size >= 2:
                mean_dc = mean_cohort_distance(u.delta, cohort)
                threshold = adaptive_threshold(cohort)
                unique = mean_dc > threshold
                result.detector_rows.append(DetectorRecord(t, u.client_id, mean_dc,
                                                           threshold, unique))
            else:
                unique = is_unique(u.delta, cohort)

        if not unique:
            out.append(u)
            pending_pairs[u.client_id] = (t, None, u.delta)
            continue

        base = ParamVector(state.history.get(u.base_epoch).copy(), state.weights.arch)
        gi = invert(u, base, opt, gi_cfg, warm=warm_results.get(u.client_id),
                    d_rec_size=d_rec_size, seed=_sub_seed(seed, 0x07, u.client_id, t))
        warm_results[u.client_id] = gi
        gi_iters += gi.iters_used
        if dump_d_rec:
            result.d_rec_dumps.append((t, u.client_id, gi.d_rec))
        est = estimate_unstale(state.weights, gi.d_rec, opt)
        if controller.mode == MODE_BLENDING:
            final = controller.blended_update(est, u.delta)
        else:
            final = est
        out.append(ModelUpdate(u.client_id, u.base_epoch, u.arrival_epoch,
                               final, u.num_samples))
        pending_pairs[u.client_id] = (t, est, u.delta)

    return out, gi_iters, e1_val, e2_val


class _EpochTimer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self._t0 = None

    def start(self):
        if self.enabled:
            import time
            self._t0 = time.perf_counter()

    def stop(self):
        if not self.enabled or self._t0 is None:
            return None
        import time
        return int((time.perf_counter() - self._t0) * 1000)
