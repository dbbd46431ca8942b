"""Experiment suites: headline runs, ablations, sweeps, robustness, the
linear nonlinearity probe, efficiency timing and BPA curve export.

Every suite returns an :class:`ExperimentReport`. Reports are written as a
CSV (one row per task/variant/grid point) plus a JSON summary named
``<suite>_<dataset>_<L_pred>_<seed>``. Wall-clock fields only go to the CSV so
the JSON is byte-identical across reruns with the same seed.
"""
from __future__ import annotations

import csv
import dataclasses
import functools
import json
import math
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint, data, seeding
from .model import TefnConfig, TefnParams, init_params, param_count, predict
from .training import AdamState, TrainConfig, adam_step, backward, mae, mse, train

HORIZONS = (96, 192, 336, 720)
LR_GRID = (0.01, 0.05, 0.1)
S_GRID = tuple(range(7))
FORWARD_LENGTHS = (96, 192, 384, 768)
BPA_GRID = np.arange(-3.0, 3.0 + 1e-9, 0.25)

# labels and config overrides of the eight ablation variants
VARIANTS = {
    "TEFN": {},
    "w/o Norm": {"use_norm": False},
    "w/o T": {"use_time_branch": False},
    "w/o C": {"use_channel_branch": False},
    "Prob": {"bpa_mode": "prob"},
    "Concat": {"fusion_mode": "concat"},
    "ReLU": {"activation": "relu"},
    "Tanh": {"activation": "tanh"},
}

TIMING_FIELDS = ("seconds_per_iter", "forward_seconds", "forward_ratios")


class ExperimentError(RuntimeError):
    """A suite member failed; ``where`` names the variant or grid point."""

    def __init__(self, where, cause):
        super().__init__(f"{where}: {cause}")
        self.where = where
        self.cause = cause


@dataclass(frozen=True)
class TaskSpec:
    dataset: str = "synthetic"
    L_in: int = 96
    L_pred: int = 96
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    seed: int = 2024
    synth: dict = field(default_factory=dict)
    free_horizon: bool = False

    def __post_init__(self):
        if not self.free_horizon and self.L_pred not in HORIZONS:
            raise ValueError(f"L_pred {self.L_pred} not in {HORIZONS}; set free_horizon to override")

    @property
    def dataset_name(self) -> str:
        if self.dataset == "synthetic":
            return "synthetic"
        return Path(self.dataset).stem

    @property
    def task_id(self) -> str:
        return f"{self.dataset_name}-{self.L_pred}"

    def replace(self, **kw) -> "TaskSpec":
        return dataclasses.replace(self, **kw)

    def model_config(self, channels, **overrides) -> TefnConfig:
        return TefnConfig(L_in=self.L_in, L_pred=self.L_pred, C=channels, **{**self.model, **overrides})

    def train_config(self, **overrides) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train, **overrides})


SYNTH_DEFAULTS = {"channels": 3, "rows": 2000, "noise": 0.1, "trend": 0.5, "period": 24.0}


@functools.lru_cache(maxsize=8)
def _load_cached(dataset, L_in, L_pred, synth_items, seed):
    if dataset == "synthetic":
        kw = {**SYNTH_DEFAULTS, **dict(synth_items)}
        channels, rows = kw.pop("channels"), kw.pop("rows")
        return data.synthetic_task_data(channels, rows, seed, L_in, L_pred, **kw)
    return data.load_task_data(data.find_spec(dataset), L_in, L_pred)


def load_data(task: TaskSpec) -> data.TaskData:
    return _load_cached(task.dataset, task.L_in, task.L_pred,
                        tuple(sorted(task.synth.items())), task.seed)


def _pmap(fn, items, threads=1):
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------ reports

@dataclass
class ExperimentReport:
    suite: str
    dataset: str
    L_pred: int
    seed: int
    records: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    def __post_init__(self):
        for rec in self.records:
            for k, v in rec.items():
                if isinstance(v, float) and k not in TIMING_FIELDS and not math.isfinite(v):
                    raise ExperimentError(rec.get("variant", rec.get("task_id", "?")), f"{k} is {v}")

    @property
    def stem(self) -> str:
        return f"{self.suite}_{self.dataset}_{self.L_pred}_{self.seed}"

    def summary(self) -> dict:
        def strip(rec):
            return {k: v for k, v in rec.items() if k not in TIMING_FIELDS}

        return {
            "suite": self.suite,
            "dataset": self.dataset,
            "L_pred": self.L_pred,
            "seed": self.seed,
            "records": [strip(r) for r in self.records],
            "aggregates": _strip_timing(self.aggregates),
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    def columns(self):
        cols = []
        for rec in self.records:
            cols.extend(k for k in rec if k not in cols and not isinstance(rec[k], (list, dict)))
        return cols

    def write(self, out_dir, footer=None):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        csv_path = out_dir / f"{self.stem}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            cols = self.columns()
            w.writerow(cols)
            for rec in self.records:
                w.writerow([_cell(rec.get(c, "")) for c in cols])
            for row in footer or []:
                w.writerow(row)
        json_path = out_dir / f"{self.stem}.json"
        json_path.write_text(self.to_json())
        return csv_path, json_path


def _strip_timing(obj):
    if isinstance(obj, dict):
        return {k: _strip_timing(v) for k, v in obj.items() if k not in TIMING_FIELDS}
    return obj


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def report_paths(out_dir, suite, dataset, L_pred, seed):
    stem = f"{suite}_{Path(dataset).stem}_{L_pred}_{seed}"
    return [Path(out_dir) / f"{stem}.{ext}" for ext in ("csv", "json", "png")]


# ------------------------------------------------------------------ core runs

def evaluate(params: TefnParams, config: TefnConfig, windows):
    """(MSE, MAE) over every forecast cell of every window, in scaler space."""
    if len(windows) == 0:
        raise ValueError("no windows to evaluate")
    y_hat = predict(windows.inputs, params, config)
    return mse(windows.targets, y_hat), mae(windows.targets, y_hat)


def gamma(metric_tefn: float, metric_variant: float) -> float:
    """Percent error change of full TEFN relative to a variant."""
    return (metric_tefn - metric_variant) / metric_variant * 100.0


@dataclass
class RunResult:
    record: dict
    params: TefnParams
    config: TefnConfig
    history: list


def run_task(task: TaskSpec, model_overrides=None, train_overrides=None, task_data=None,
             label="TEFN") -> RunResult:
    """Train on the task's train split and score the best params on its test split."""
    d = load_data(task) if task_data is None else task_data
    cfg = task.model_config(d.channels, **(model_overrides or {}))
    tc = task.train_config(**(train_overrides or {}))
    t0 = time.perf_counter()
    params, history = train(d.train, d.val, cfg, tc)
    elapsed = time.perf_counter() - t0
    test_mse, test_mae = evaluate(params, cfg, d.test)
    iters = len(history) * math.ceil(len(d.train) / tc.batch_size)
    best = min(history, key=lambda r: r.val_mse)
    record = {
        "task_id": task.task_id,
        "variant": label,
        "mse": test_mse,
        "mae": test_mae,
        "best_epoch": best.epoch,
        "epochs_run": len(history),
        "param_count": param_count(cfg),
        "checkpoint_bytes": checkpoint.checkpoint_size(cfg),
        "seconds_per_iter": elapsed / max(iters, 1),
    }
    return RunResult(record, params, cfg, history)


def _guarded(where, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except ExperimentError:
        raise
    except Exception as exc:  # annotate which member failed
        raise ExperimentError(where, exc) from exc


def headline(task: TaskSpec) -> ExperimentReport:
    res = run_task(task)
    return ExperimentReport("train", task.dataset_name, task.L_pred, task.seed, [res.record])


def ablation_suite(task: TaskSpec, threads=1, variants=None) -> ExperimentReport:
    d = load_data(task)
    names = list(variants or VARIANTS)
    if "TEFN" not in names:
        names.insert(0, "TEFN")

    def one(name):
        return _guarded(f"variant {name}", run_task, task, VARIANTS[name], task_data=d, label=name).record

    records = _pmap(one, names, threads)
    base = records[names.index("TEFN")]
    for rec in records:
        rec["baseline"] = "TEFN"
        rec["gamma_mse"] = gamma(base["mse"], rec["mse"])
        rec["gamma_mae"] = gamma(base["mae"], rec["mae"])
    by = {r["variant"]: r for r in records}
    aggregates = {"baseline": "TEFN"}
    if "w/o T" in by and "w/o C" in by:
        aggregates["fused_minus_best_single_mse"] = base["mse"] - min(by["w/o T"]["mse"], by["w/o C"]["mse"])
    return ExperimentReport("ablate", task.dataset_name, task.L_pred, task.seed, records, aggregates)


def grid_variance(records, keys=("mse", "mae")) -> dict:
    """Population variance of each metric over the recorded grid."""
    return {f"var_{k}": statistics.pvariance([r[k] for r in records]) for k in keys}


def hyperparam_sweep(task: TaskSpec, lr_grid=LR_GRID, S_grid=S_GRID, threads=1) -> ExperimentReport:
    if not lr_grid or not S_grid:
        raise ValueError("sweep grids must be nonempty")
    d = load_data(task)
    points = [(lr, S) for lr in lr_grid for S in S_grid]

    def one(point):
        lr, S = point
        res = _guarded(f"grid point lr={lr} S={S}", run_task, task, {"S": S}, {"lr": lr},
                       task_data=d, label=f"lr={lr},S={S}")
        return {**res.record, "lr": lr, "S": S}

    records = _pmap(one, points, threads)
    aggregates = {**grid_variance(records), "points": len(records)}
    return ExperimentReport("sweep", task.dataset_name, task.L_pred, task.seed, records, aggregates)


def _noisy_split(windows, rng_like):
    return windows.with_inputs(data.inject_noise(windows.inputs, rng_like))


def noisy_task_data(task: TaskSpec, d: data.TaskData, noise_source=None) -> data.TaskData:
    """Corrupt the inputs of every split; targets stay clean.

    ``noise_source(split_name)`` returns the normal generator for a split; the
    default draws from ``seeding.rng(seed, "noise", task_id, split)``.
    """
    if noise_source is None:
        def noise_source(split):
            return seeding.rng(task.seed, seeding.NOISE, task.task_id, split)

    return dataclasses.replace(
        d,
        train=_noisy_split(d.train, noise_source("train")),
        val=_noisy_split(d.val, noise_source("val")),
        test=_noisy_split(d.test, noise_source("test")),
    )


def robustness_run(task: TaskSpec, protocol="retrain", noise_source=None) -> ExperimentReport:
    """Clean vs noisy-input metrics.

    ``protocol="retrain"`` trains a second model on noisy inputs and scores it
    on noisy test inputs; ``"clean_model"`` scores the clean model on noisy
    test inputs.
    """
    if protocol not in ("retrain", "clean_model"):
        raise ValueError(f"unknown protocol {protocol!r}")
    d = load_data(task)
    noisy = noisy_task_data(task, d, noise_source)
    clean = _guarded("clean run", run_task, task, task_data=d, label="clean")
    if protocol == "retrain":
        noisy_rec = _guarded("noisy run", run_task, task, task_data=noisy, label="noisy").record
    else:
        n_mse, n_mae = evaluate(clean.params, clean.config, noisy.test)
        noisy_rec = {**clean.record, "variant": "noisy", "mse": n_mse, "mae": n_mae}
    records = [clean.record, noisy_rec]
    aggregates = {
        "protocol": protocol,
        "delta_mse": noisy_rec["mse"] - clean.record["mse"],
        "delta_mae": noisy_rec["mae"] - clean.record["mae"],
    }
    return ExperimentReport("robustness", task.dataset_name, task.L_pred, task.seed, records, aggregates)


PROBE_MODEL = {"linear_probe": True, "use_norm": False}


def nonlinearity_probe(task: TaskSpec, horizons=HORIZONS, threads=1) -> ExperimentReport:
    """Score a single shared affine time projection per horizon."""

    def one(h):
        t = task.replace(L_pred=h)
        return _guarded(f"horizon {h}", run_task, t, PROBE_MODEL, label=f"probe-{h}").record | {"L_pred": h}

    records = _pmap(one, horizons, threads)
    return ExperimentReport("probe", task.dataset_name, max(horizons), task.seed, records,
                            {"horizons": list(horizons)})


def time_forward(L_total, C=7, S=1, batch=32, repeats=100, seed=0) -> float:
    """Median wall time of one batched forward with ``L_in = L_pred = L_total / 2``."""
    L_in = L_total // 2
    cfg = TefnConfig(L_in=L_in, L_pred=L_total - L_in, C=C, S=S)
    params = init_params(cfg, seed)
    x = seeding.rng(seed, "timing").standard_normal((batch, L_in, C))
    for _ in range(3):
        predict(x, params, cfg)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        predict(x, params, cfg)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def efficiency_report(task: TaskSpec, iterations=100, lengths=FORWARD_LENGTHS) -> ExperimentReport:
    d = load_data(task)
    cfg = task.model_config(d.channels)
    tc = task.train_config()
    params = init_params(cfg, tc.seed)
    state = AdamState.zeros(params)
    order = seeding.rng(tc.seed, seeding.SHUFFLE, 1).permutation(len(d.train))
    samples = []
    for i in range(max(iterations, 1)):
        idx = order[(i * tc.batch_size) % len(order):][: tc.batch_size]
        t0 = time.perf_counter()
        _, grads = backward((d.train.inputs[idx], d.train.targets[idx]), params, cfg)
        params, state = adam_step(params, grads, state, tc.lr)
        samples.append(time.perf_counter() - t0)
    saved = len(checkpoint.encode(params, cfg))
    record = {
        "task_id": task.task_id,
        "variant": "TEFN",
        "param_count": param_count(cfg),
        "checkpoint_bytes": saved,
        "predicted_checkpoint_bytes": checkpoint.checkpoint_size(cfg),
        "seconds_per_iter": statistics.median(samples),
    }
    curve = [time_forward(L, C=cfg.C, S=cfg.S, batch=tc.batch_size) for L in lengths]
    records = [record] + [
        {"task_id": task.task_id, "variant": f"forward-L{L}", "L_total": L, "forward_seconds": t}
        for L, t in zip(lengths, curve)
    ]
    ratios = {f"ratio_{b}_{a}": tb / ta for (a, ta), (b, tb) in zip(zip(lengths, curve), zip(lengths[1:], curve[1:]))}
    return ExperimentReport("efficiency", task.dataset_name, task.L_pred, task.seed, records,
                            {"forward_ratios": ratios, "lengths": list(lengths)})


# ------------------------------------------------------------------ BPA export

BPA_COLUMNS = ["branch", "index", "event", "slope", "intercept"] + [f"mu@{x:g}" for x in BPA_GRID]


def bpa_rows(params: TefnParams, config: TefnConfig):
    rows = []
    for branch, w, b in (("time", params.w_T, params.b_T), ("channel", params.w_C, params.b_C)):
        for j in range(w.shape[0]):
            for k in range(w.shape[1]):
                mu = w[j, k] * BPA_GRID + b[j, k]
                rows.append([branch, j, k, float(w[j, k]), float(b[j, k]), *map(float, mu)])
    return rows


def export_bpa_curves(params: TefnParams, config: TefnConfig, path):
    """Write slope, intercept and sampled membership lines of every BPA cell."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BPA_COLUMNS)
        for row in bpa_rows(params, config):
            w.writerow([_cell(v) for v in row])
    return path
