"""Command-line entry point.

Exit codes: 0 success, 1 configuration/usage error, 2 data or shape error,
3 numeric failure (non-finite loss, failed gradient check).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import sys
from pathlib import Path

from . import checkpoint, data, experiments, plotting, seeding
from .config import ConfigError, load_run_config
from .model import ACTIVATIONS, BPA_MODES, FUSION_MODES, ShapeMismatch, TefnConfig, TefnParams, param_shapes
from .training import NonFiniteLoss, finite_diff_check, write_history_csv

log = logging.getLogger("tefn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="run configuration file (INI)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--seed", help="u64 seed; determines every output")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    p.add_argument("--threads", type=int, default=1, help="worker threads for suite members")
    p.add_argument("--no-plots", action="store_true", help="skip figure rendering")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="tefn", description="Time Evidence Fusion Network forecasting engine")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)
    common = [_common()]
    sub.add_parser("train", parents=common, help="train, write checkpoint/history/metrics")
    ev = sub.add_parser("eval", parents=common, help="score a checkpoint on a test split")
    ev.add_argument("--checkpoint", type=Path, required=True)
    ev.add_argument("--dataset", help="builtin name, dataset spec file, or 'synthetic'")
    ev.add_argument("--pred-len", type=int, help="expected horizon; must match the checkpoint")
    sub.add_parser("sweep", parents=common, help="lr x |S| grid with metric variances")
    sub.add_parser("ablate", parents=common, help="the eight ablation variants with gamma ratios")
    sub.add_parser("robustness", parents=common, help="clean vs noisy-input runs")
    sub.add_parser("probe", parents=common, help="linear-projection nonlinearity probe per horizon")
    sub.add_parser("gradcheck", parents=common, help="finite-difference check of every variant")
    sub.add_parser("efficiency", parents=common, help="iteration time, size and forward-time curve")
    ex = sub.add_parser("export-bpa", parents=common, help="dump BPA membership lines")
    ex.add_argument("--checkpoint", type=Path, help="use these params instead of training")
    return parser


def _guard_outputs(paths, overwrite):
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not overwrite:
        raise UsageError(f"refusing to overwrite {', '.join(existing)} (pass --overwrite)")


def _dump_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_report(report, out, args, footer=None):
    csv_path, json_path = report.write(out, footer)
    print(f"wrote {csv_path}")
    print(f"wrote {json_path}")
    if not args.no_plots:
        fig = plotting.plot_report(report, out / f"{report.stem}.png")
        if fig:
            print(f"wrote {fig}")


# ------------------------------------------------------------------ commands

def cmd_train(args, cfg):
    task = cfg.task()
    out = cfg.out
    files = [out / "checkpoint.tefn", out / "history.csv", out / "metrics.json"]
    _guard_outputs(files, args.overwrite)
    res = experiments.run_task(task)
    out.mkdir(parents=True, exist_ok=True)
    size = checkpoint.save_checkpoint(res.params, res.config, files[0])
    write_history_csv(res.history, files[1])
    metrics = {k: v for k, v in res.record.items() if k not in experiments.TIMING_FIELDS}
    metrics.update(seed=task.seed, checkpoint_bytes=size, model=res.config.to_dict(),
                   train=task.train_config().to_dict())
    _dump_json(metrics, files[2])
    if not args.no_plots:
        plotting.plot_history(res.history, out / "history.png")
    print(f"test MSE {res.record['mse']:.6f} MAE {res.record['mae']:.6f}")
    return EXIT_OK


def _eval_data(cfg, dataset, model_cfg):
    task = cfg.task().replace(dataset=dataset, L_in=model_cfg.L_in, L_pred=model_cfg.L_pred,
                              free_horizon=True)
    return experiments.load_data(task)


def cmd_eval(args, cfg):
    params, model_cfg = checkpoint.load_checkpoint(args.checkpoint)
    if args.pred_len is not None and args.pred_len != model_cfg.L_pred:
        raise ShapeMismatch(f"checkpoint horizon is {model_cfg.L_pred}, requested {args.pred_len}")
    dataset = args.dataset or cfg.dataset
    out = cfg.out / "eval_metrics.json"
    _guard_outputs([out], args.overwrite)
    d = _eval_data(cfg, dataset, model_cfg)
    if d.channels != model_cfg.C:
        raise ShapeMismatch(f"checkpoint expects {model_cfg.C} channels, dataset {dataset} has {d.channels}")
    test_mse, test_mae = experiments.evaluate(params, model_cfg, d.test)
    cfg.out.mkdir(parents=True, exist_ok=True)
    # a content hash, not the path, so reruns from other directories stay byte-identical
    digest = hashlib.sha256(Path(args.checkpoint).read_bytes()).hexdigest()
    _dump_json({"checkpoint_sha256": digest, "dataset": Path(str(dataset)).stem,
                "L_pred": model_cfg.L_pred, "mse": test_mse, "mae": test_mae}, out)
    print(f"test MSE {test_mse:.6f} MAE {test_mae:.6f}")
    return EXIT_OK


def _suite(name, args, cfg, run, footer=None, L_pred=None):
    task = cfg.task()
    stem = f"{name}_{task.dataset_name}_{L_pred or task.L_pred}_{task.seed}"
    _guard_outputs([cfg.out / f"{stem}.{e}" for e in ("csv", "json", "png")], args.overwrite)
    report = run(task)
    _write_report(report, cfg.out, args, footer(report) if footer else None)
    return report


def cmd_sweep(args, cfg):
    def footer(rep):
        return [["# var_mse", repr(rep.aggregates["var_mse"])], ["# var_mae", repr(rep.aggregates["var_mae"])]]

    rep = _suite("sweep", args, cfg, lambda t: experiments.hyperparam_sweep(
        t, cfg.get("sweep", "lr_grid"), cfg.get("sweep", "S_grid"), threads=args.threads), footer)
    print(f"var(MSE) {rep.aggregates['var_mse']:.3e} var(MAE) {rep.aggregates['var_mae']:.3e}")
    return EXIT_OK


def cmd_ablate(args, cfg):
    rep = _suite("ablate", args, cfg, lambda t: experiments.ablation_suite(t, threads=args.threads))
    for r in rep.records:
        print(f"{r['variant']:>9}  MSE {r['mse']:.4f} ({r['gamma_mse']:+.2f}%)  MAE {r['mae']:.4f} ({r['gamma_mae']:+.2f}%)")
    return EXIT_OK


def cmd_robustness(args, cfg):
    rep = _suite("robustness", args, cfg, lambda t: experiments.robustness_run(
        t, protocol=cfg.get("robustness", "protocol")))
    print(f"delta MSE {rep.aggregates['delta_mse']:+.4f} delta MAE {rep.aggregates['delta_mae']:+.4f}")
    return EXIT_OK


def cmd_probe(args, cfg):
    horizons = cfg.get("probe", "horizons")
    rep = _suite("probe", args, cfg, lambda t: experiments.nonlinearity_probe(
        t, horizons, threads=args.threads), L_pred=max(horizons))
    for r in rep.records:
        print(f"L_pred {r['L_pred']:>4}  MSE {r['mse']:.4f}  MAE {r['mae']:.4f}")
    return EXIT_OK


def cmd_efficiency(args, cfg):
    rep = _suite("efficiency", args, cfg, lambda t: experiments.efficiency_report(
        t, cfg.get("efficiency", "iterations"), cfg.get("efficiency", "lengths")))
    head = rep.records[0]
    print(f"params {head['param_count']}  checkpoint {head['checkpoint_bytes']} B  "
          f"iteration {head['seconds_per_iter'] * 1e3:.3f} ms")
    for k, v in rep.aggregates["forward_ratios"].items():
        print(f"{k}: {v:.2f}")
    return EXIT_OK


def gradcheck_combos(S_values):
    branches = ((True, True), (True, False), (False, True))
    for norm, (t, c), bpa, fusion, act, S in itertools.product(
            (True, False), branches, BPA_MODES, FUSION_MODES, ACTIVATIONS, S_values):
        if fusion == "concat" and not (t and c):
            continue
        yield dict(use_norm=norm, use_time_branch=t, use_channel_branch=c, bpa_mode=bpa,
                   fusion_mode=fusion, activation=act, S=S)


def run_gradcheck(g, seed):
    """Finite-difference check over every valid variant; returns (rows, worst per tensor)."""
    rows, worst = [], {}
    for i, flags in enumerate(gradcheck_combos(g["S_values"])):
        cfg = TefnConfig(L_in=g["L_in"], L_pred=g["L_pred"], C=g["C"], **flags)
        r = seeding.rng(seed, "gradcheck-instance", i)
        params = TefnParams(**{k: r.standard_normal(s) for k, s in param_shapes(cfg).items()})
        X = r.standard_normal((g["batch"], cfg.L_in, cfg.C))
        Y = r.standard_normal((g["batch"], cfg.L_pred, cfg.C))
        rep = finite_diff_check(params, (X, Y), cfg, step=g["step"], tol=g["tol"])
        for k, v in rep.max_rel_error.items():
            worst[k] = max(worst.get(k, 0.0), v)
        rows.append({**flags, "worst_tensor": rep.worst_tensor, "max_rel_error": rep.worst,
                     "passed": rep.passed})
    return rows, worst


def cmd_gradcheck(args, cfg):
    g = cfg.sections["gradcheck"]
    stem = f"gradcheck_{g['L_in']}_{g['L_pred']}_{cfg.seed}"
    files = [cfg.out / f"{stem}.csv", cfg.out / f"{stem}.json"]
    _guard_outputs(files, args.overwrite)
    rows, worst = run_gradcheck(g, cfg.seed)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with open(files[0], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    ok = all(v < g["tol"] for v in worst.values())
    _dump_json({"combos": len(rows), "tol": g["tol"], "step": g["step"],
                "max_rel_error": worst, "passed": ok}, files[1])
    for k, v in worst.items():
        print(f"{k:>4}  worst relative error {v:.3e}")
    print(f"{len(rows)} variant combinations, {'PASS' if ok else 'FAIL'} at tol {g['tol']:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_export_bpa(args, cfg):
    task = cfg.task()
    ck = args.checkpoint or cfg.get("export", "checkpoint")
    if ck:
        params, model_cfg = checkpoint.load_checkpoint(ck)
        L_pred = model_cfg.L_pred
    else:
        params = model_cfg = None
        L_pred = task.L_pred
    stem = f"bpa_{task.dataset_name}_{L_pred}_{task.seed}"
    files = [cfg.out / f"{stem}.csv", cfg.out / f"{stem}.png"]
    _guard_outputs(files, args.overwrite)
    if params is None:
        res = experiments.run_task(task)
        params, model_cfg = res.params, res.config
    path = experiments.export_bpa_curves(params, model_cfg, files[0])
    print(f"wrote {path}")
    if not args.no_plots:
        print(f"wrote {plotting.plot_bpa_curves(params, files[1])}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "robustness": cmd_robustness,
    "probe": cmd_probe,
    "gradcheck": cmd_gradcheck,
    "efficiency": cmd_efficiency,
    "export-bpa": cmd_export_bpa,
}


def _exit_code(exc):
    if isinstance(exc, experiments.ExperimentError):
        return _exit_code(exc.cause)
    if isinstance(exc, NonFiniteLoss):
        return EXIT_NUMERIC
    if isinstance(exc, (data.DataError, ShapeMismatch, checkpoint.CheckpointError, OSError)):
        return EXIT_DATA
    return EXIT_CONFIG


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_run_config(args.config, args.overrides, args.seed, args.out)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, ValueError, data.DataError, ShapeMismatch, OSError,
            checkpoint.CheckpointError, NonFiniteLoss, experiments.ExperimentError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
