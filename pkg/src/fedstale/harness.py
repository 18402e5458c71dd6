"""Suite runner: executes (seed x method) grids, persists metrics/detector
CSVs and a summary JSON, expands presets (including sweeps), and recomputes
summaries from raw CSVs."""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, PRESETS, parse_config_text, preset_config, \
    serialize_config
from .sim import DETECTOR_CSV_HEADER, METRICS_CSV_HEADER, MetricsRecord, RunResult, \
    run_training
from .switching import MODE_ESTIMATING

LATE_WINDOW = 50  # epochs in the late-training mean

WORKERS_ENV = "FEDSTALE_WORKERS"


@dataclass
class SuiteResult:
    out_dir: Path
    summary: dict
    aborted: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.aborted


def _run_job(args):
    text, method, seed = args
    config = parse_config_text(text)
    return method, seed, run_training(config, method, seed)


def run_suite(config: ExperimentConfig, out_dir=None) -> SuiteResult:
    """Run every (method, seed) combination and write the suite artifacts:
    metrics.csv, detector_<method>_<seed>.csv, summary.json, config.txt.
    Deterministic per (config, seed), so rerunning overwrites identical files.
    """
    out = Path(out_dir if out_dir is not None else config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    jobs = [(serialize_config(config), m, s) for m in config.methods for s in config.seeds]
    workers = int(os.environ.get(WORKERS_ENV, "1"))
    results: dict[tuple[str, int], RunResult] = {}
    if workers > 1 and len(jobs) > 1:
        import multiprocessing as mp
        with ProcessPoolExecutor(max_workers=workers,
                                 mp_context=mp.get_context("spawn")) as pool:
            for method, seed, res in pool.map(_run_job, jobs):
                results[(method, seed)] = res
    else:
        for job in jobs:
            method, seed, res = _run_job(job)
            results[(method, seed)] = res

    rows = []
    for method in config.methods:
        for seed in config.seeds:
            rows.extend(results[(method, seed)].metrics)
    write_metrics_csv(out / "metrics.csv", rows)

    for (method, seed), res in results.items():
        if res.detector_rows:
            path = out / f"detector_{method}_{seed}.csv"
            with open(path, "w") as f:
                f.write(DETECTOR_CSV_HEADER + "\n")
                for r in res.detector_rows:
                    f.write(r.to_csv_row() + "\n")
        for epoch, client_id, d_rec in res.d_rec_dumps:
            _write_d_rec(out / "d_rec", method, seed, epoch, client_id, d_rec)

    aborted = [{"method": m, "seed": s, "reason": r.abort_reason}
               for (m, s), r in sorted(results.items()) if r.aborted]
    summary = build_summary(rows, aborted)
    with open(out / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    with open(out / "config.txt", "w") as f:
        f.write(serialize_config(config))
    return SuiteResult(out, summary, aborted)


def write_metrics_csv(path, rows: list[MetricsRecord]) -> None:
    with open(path, "w") as f:
        f.write(METRICS_CSV_HEADER + "\n")
        for r in rows:
            f.write(r.to_csv_row() + "\n")


def read_metrics_csv(path) -> list[MetricsRecord]:
    rows = []
    with open(path) as f:
        header = f.readline().strip()
        if header != METRICS_CSV_HEADER:
            raise ValueError(f"{path}: unexpected metrics header")
        for line in f:
            parts = line.rstrip("\n").split(",")
            rows.append(MetricsRecord(
                epoch=int(parts[0]), method=parts[1], seed=int(parts[2]),
                overall_acc=float(parts[3]) if parts[3] else None,
                target_class_acc=float(parts[4]) if parts[4] else None,
                e1=float(parts[5]) if parts[5] else None,
                e2=float(parts[6]) if parts[6] else None,
                switch_state=parts[7],
                gi_iters=int(parts[8]) if parts[8] else None,
                wallclock_ms=int(parts[9]) if parts[9] else None))
    return rows


def _write_d_rec(dump_dir: Path, method, seed, epoch, client_id, d_rec) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"{method}_s{seed}_c{client_id}_e{epoch}.csv"
    soft = d_rec.soft_labels()
    with open(path, "w") as f:
        f.write(",".join([f"f{i}" for i in range(d_rec.dim)]
                         + [f"y{c}" for c in range(d_rec.num_classes)]) + "\n")
        for x, y in zip(d_rec.features, soft):
            f.write(",".join(f"{v:.6f}" for v in x) + ","
                    + ",".join(f"{v:.6f}" for v in y) + "\n")


# --- summaries ---

def _series(rows, method, seed):
    sel = sorted((r for r in rows if r.method == method and r.seed == seed),
                 key=lambda r: r.epoch)
    return sel


def build_summary(rows: list[MetricsRecord], aborted: list | None = None) -> dict:
    """Per-method final / best / late-window target-class accuracy (per seed
    and medians), plus relative-epochs ratios against "ours" when present."""
    methods = sorted({r.method for r in rows})
    seeds = sorted({r.seed for r in rows})
    out = {"methods": {}, "aborts": aborted or [],
           "late_window": LATE_WINDOW}
    for m in methods:
        per_seed = {}
        for s in seeds:
            series = _series(rows, m, s)
            accs = [r.target_class_acc for r in series if r.target_class_acc is not None]
            if not accs:
                continue
            late = accs[-LATE_WINDOW:]
            per_seed[str(s)] = {
                "final_target_acc": accs[-1],
                "best_target_acc": max(accs),
                "late_target_acc": float(np.mean(late)),
                "final_overall_acc": next(
                    (r.overall_acc for r in reversed(series)
                     if r.overall_acc is not None), None),
            }
        if not per_seed:
            continue
        med = {}
        for key in ("final_target_acc", "best_target_acc", "late_target_acc",
                    "final_overall_acc"):
            vals = [v[key] for v in per_seed.values() if v[key] is not None]
            med[key] = float(np.median(vals)) if vals else None
        out["methods"][m] = {"per_seed": per_seed, "median": med}

    if "ours" in methods:
        ratios = {}
        for m in methods:
            if m == "ours":
                continue
            ratios[m] = compare_epochs_to_accuracy(rows, m, "ours")
        out["relative_epochs_vs_ours"] = ratios
    return out


def compare_epochs_to_accuracy(metrics: list[MetricsRecord], reference_method: str,
                               target_method: str, column: str = "overall_acc") -> dict:
    """Epochs for the reference to first reach the target method's final
    accuracy, divided by the target's epochs; per seed plus the median.
    Seeds where the reference never reaches the level report "not reached"."""
    seeds = sorted({r.seed for r in metrics if r.method == target_method})
    per_seed = {}
    numeric = []
    for s in seeds:
        tgt = _series(metrics, target_method, s)
        ref = _series(metrics, reference_method, s)
        if not tgt or not ref:
            continue
        tgt_vals = [getattr(r, column) for r in tgt if getattr(r, column) is not None]
        if not tgt_vals:
            continue
        level = tgt_vals[-1]
        tgt_epochs = len(tgt)
        reached = next((i + 1 for i, r in enumerate(ref)
                        if getattr(r, column) is not None
                        and getattr(r, column) >= level), None)
        if reached is None:
            per_seed[str(s)] = "not reached"
        else:
            ratio = reached / tgt_epochs
            per_seed[str(s)] = ratio
            numeric.append(ratio)
    if not per_seed:
        return {"per_seed": per_seed, "median": "not reached"}
    padded = numeric + [np.inf] * (len(per_seed) - len(numeric))
    med = float(np.median(padded))
    return {"per_seed": per_seed,
            "median": med if np.isfinite(med) else "not reached"}


# --- presets ---

def _cell_name(key: str, value: str) -> str:
    return f"{key.split('.')[-1]}={value}"


def run_preset(name: str, out_dir, overrides: dict | None = None) -> dict:
    """Expand a preset into its cells, run each, and write grid_summary.json.

    table2 is staged: the switch-point A/B needs the auto-detected switch
    epoch before the forced variants can be configured.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if name == "table2":
        grid = _run_switch_ab(out, overrides)
    else:
        spec = PRESETS[name]
        grid = {"preset": name, "cells": {}}
        if "sweep" in spec:
            key, values = spec["sweep"]
            for v in values:
                cfg = preset_config(name, {**(overrides or {}), key: v})
                cell = _cell_name(key, v)
                res = run_suite(cfg, out / cell)
                grid["cells"][cell] = res.summary
        else:
            cfg = preset_config(name, overrides)
            res = run_suite(cfg, out / "base")
            grid["cells"]["base"] = res.summary
    with open(out / "grid_summary.json", "w") as f:
        json.dump(grid, f, indent=2, sort_keys=True)
        f.write("\n")
    return grid


def detected_switch_epoch(rows: list[MetricsRecord], method: str = "ours",
                          seed: int | None = None) -> int | None:
    """First epoch whose switch_state left "estimating" (None if it never did)."""
    for r in sorted(rows, key=lambda r: r.epoch):
        if r.method == method and (seed is None or r.seed == seed) \
                and r.switch_state and r.switch_state != MODE_ESTIMATING:
            return r.epoch
    return None


def _run_switch_ab(out: Path, overrides: dict | None) -> dict:
    grid = {"preset": "table2", "cells": {}}
    auto_cfg = preset_config("table2", overrides)
    auto = run_suite(auto_cfg, out / "auto")
    grid["cells"]["auto"] = auto.summary

    none_cfg = preset_config("table2", {**(overrides or {}), "switch.enabled": "false"})
    grid["cells"]["none"] = run_suite(none_cfg, out / "none").summary

    rows = read_metrics_csv(out / "auto" / "metrics.csv")
    detected = {s: detected_switch_epoch(rows, "ours", s) for s in auto_cfg.seeds}
    grid["detected_switch_epochs"] = {str(s): e for s, e in detected.items()}
    for offset, cell in ((-20, "minus20"), (20, "plus20")):
        cell_rows = []
        aborted = []
        for s in auto_cfg.seeds:
            if detected[s] is None:
                continue
            force = max(1, detected[s] + offset)
            cfg = preset_config("table2", {**(overrides or {}),
                                           "switch.force_epoch": str(force),
                                           "seeds": str(s)})
            res = run_training(cfg, "ours", s)
            cell_rows.extend(res.metrics)
            if res.aborted:
                aborted.append({"method": "ours", "seed": s, "reason": res.abort_reason})
        if cell_rows:
            cell_dir = out / cell
            cell_dir.mkdir(parents=True, exist_ok=True)
            write_metrics_csv(cell_dir / "metrics.csv", cell_rows)
            grid["cells"][cell] = build_summary(cell_rows, aborted)
    return grid


def summarize_dir(in_dir) -> dict:
    """Recompute the summary for a suite directory from its raw metrics.csv
    (the determinism cross-check for summary.json) and rewrite it."""
    in_dir = Path(in_dir)
    path = in_dir / "metrics.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; point --in at a suite directory")
    rows = read_metrics_csv(path)
    summary = build_summary(rows)
    with open(in_dir / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary
