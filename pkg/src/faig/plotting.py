"""Figures from report CSVs: masking curves and filter-depth distribution."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import numpy as np


def _save(fig, path: Path) -> list[Path]:
    out = []
    for ext, meta in (("png", {"Software": None}), ("svg", {"Date": None})):
        p = path.with_suffix(f".{ext}")
        fig.savefig(p, metadata=meta, dpi=120)
        out.append(p)
    return out


def plot_reports(reports: Path, figures: Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .pipeline import read_csv

    figures.mkdir(parents=True, exist_ok=True)
    written = []

    sweep = reports / "sweep_summary.csv"
    if sweep.exists():
        rows = read_csv(sweep)
        fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
        for ax, sel in zip(axes, ("blur", "noise")):
            curves = defaultdict(list)
            for r in rows:
                if r["selected"] in (sel, "any"):
                    curves[(r["method"], r["input"])].append(
                        (float(r["fraction"]), float(r["grad_mse_mean"]), float(r["grad_mse_std"])))
            for (method, inp), pts in sorted(curves.items()):
                pts.sort()
                x, y, e = map(np.array, zip(*pts))
                ax.errorbar(x * 100, y, yerr=e, marker="o", capsize=2, label=f"{method} / {inp} input")
            ax.set_xscale("log")
            ax.set_xlabel("masked filters (%)")
            ax.set_title(f"masking {'deblurring' if sel == 'blur' else 'denoising'} filters")
            ax.legend(fontsize=7)
        axes[0].set_ylabel("gray-gradient MSE vs target")
        fig.tight_layout()
        written += _save(fig, figures / "mask_curves")
        plt.close(fig)

    dist = reports / "distribution.csv"
    if dist.exists():
        rows = read_csv(dist)
        fig, ax = plt.subplots(figsize=(10, 3.5))
        layers = list(dict.fromkeys(r["layer"] for r in rows))
        width = 0.4
        for k, d in enumerate(("blur", "noise")):
            counts = defaultdict(list)
            for r in rows:
                if r["degradation"] == d:
                    counts[r["layer"]].append(int(r["count"]))
            means = [np.mean(counts[layer]) for layer in layers]
            ax.bar(np.arange(len(layers)) + (k - 0.5) * width, means, width,
                   label="deblurring" if d == "blur" else "denoising")
        ax.set_xticks(np.arange(len(layers)))
        ax.set_xticklabels(layers, rotation=60, fontsize=7)
        ax.set_ylabel("discovered filters (mean over seeds)")
        ax.legend()
        fig.tight_layout()
        written += _save(fig, figures / "filter_distribution")
        plt.close(fig)
    return written
