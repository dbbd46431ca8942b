"""Figures rendered next to the CSV/JSON reports."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 7,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 110,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_history(history, path):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        epochs = [r.epoch for r in history]
        ax.plot(epochs, [r.train_mse for r in history], "o-", label="train")
        ax.plot(epochs, [r.val_mse for r in history], "s-", label="val")
        ax.set_xlabel("epoch")
        ax.set_ylabel("MSE")
        ax.legend()
        return _save(fig, path)


def plot_ablation(report, path):
    recs = report.records
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(6, 3))
        x = np.arange(len(recs))
        ax.bar(x - 0.2, [r["mse"] for r in recs], 0.4, label="MSE")
        ax.bar(x + 0.2, [r["mae"] for r in recs], 0.4, label="MAE")
        ax.set_xticks(x, [r["variant"] for r in recs], rotation=30)
        for xi, r in zip(x, recs):
            ax.annotate(f"{r['gamma_mse']:+.2f}%", (xi - 0.2, r["mse"]), ha="center",
                        va="bottom", fontsize=6)
        ax.set_title(f"{report.dataset}-{report.L_pred} ablation")
        ax.legend()
        return _save(fig, path)


def plot_sweep(report, path):
    recs = report.records
    lrs = sorted({r["lr"] for r in recs})
    Ss = sorted({r["S"] for r in recs})
    grid = np.full((len(lrs), len(Ss)), np.nan)
    for r in recs:
        grid[lrs.index(r["lr"]), Ss.index(r["S"])] = r["mse"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 2.6))
        im = ax.imshow(grid, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(Ss)), [str(s) for s in Ss])
        ax.set_yticks(range(len(lrs)), [f"{lr:g}" for lr in lrs])
        ax.set_xlabel("|S|")
        ax.set_ylabel("lr")
        fig.colorbar(im, ax=ax, label="test MSE")
        ax.set_title(f"var(MSE) = {report.aggregates['var_mse']:.2e}")
        return _save(fig, path)


def plot_robustness(report, path):
    clean, noisy = report.records
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(3.5, 3))
        x = np.arange(2)
        ax.bar(x - 0.2, [clean["mse"], clean["mae"]], 0.4, label="clean")
        ax.bar(x + 0.2, [noisy["mse"], noisy["mae"]], 0.4, label="noisy")
        ax.set_xticks(x, ["MSE", "MAE"])
        ax.legend()
        return _save(fig, path)


def plot_probe(report, path):
    recs = report.records
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        h = [r["L_pred"] for r in recs]
        ax.plot(h, [r["mse"] for r in recs], "o-", label="MSE")
        ax.plot(h, [r["mae"] for r in recs], "s-", label="MAE")
        ax.set_xlabel("horizon")
        ax.legend()
        return _save(fig, path)


def plot_efficiency(report, path):
    curve = [r for r in report.records if "L_total" in r]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        L = np.array([r["L_total"] for r in curve], dtype=float)
        t = np.array([r["forward_seconds"] for r in curve])
        ax.loglog(L, t * 1e3, "o-", label="forward")
        ax.loglog(L, t[0] * 1e3 * L / L[0], "--", color="0.6", label="linear reference")
        ax.set_xlabel("L = L_in + L_pred")
        ax.set_ylabel("median forward (ms)")
        ax.legend()
        return _save(fig, path)


def plot_bpa_curves(params, path, grid=None, max_lines=64):
    """Membership lines ``w*x + b`` of the channel and time BPA tables."""
    x = np.linspace(-3, 3, 25) if grid is None else grid
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 2, figsize=(8, 3), sharey=True)
        for ax, (title, w, b) in zip(axes, (("Channel BPA", params.w_C, params.b_C),
                                            ("Time BPA", params.w_T, params.b_T))):
            rows = np.linspace(0, w.shape[0] - 1, min(w.shape[0], max_lines)).astype(int)
            for j in np.unique(rows):
                for k in range(w.shape[1]):
                    ax.plot(x, w[j, k] * x + b[j, k], lw=0.7, alpha=0.8)
            ax.set_title(title)
            ax.set_xlabel("normalized input")
        axes[0].set_ylabel("membership")
        return _save(fig, path)


PLOTTERS = {
    "ablate": plot_ablation,
    "sweep": plot_sweep,
    "robustness": plot_robustness,
    "probe": plot_probe,
    "efficiency": plot_efficiency,
}


def plot_report(report, path):
    fn = PLOTTERS.get(report.suite)
    return fn(report, path) if fn else None
