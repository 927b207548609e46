"""Variant comparison table and training curves from finished runs."""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import FormatError
from .network import VARIANTS, canonical_variant
from .trainer import best_row, read_metrics

COMPARISON_COLUMNS = ["run", "variant", "seed", "best_epoch", "val_acc", "unseen_acc", "mac_ratio", "mean_density"]


@dataclass
class Run:
    name: str
    variant: str
    seed: int
    rows: List[Dict[str, float]]

    @property
    def targets(self) -> List[str]:
        return [k[4:] for k in self.rows[0] if k.startswith("acc_")]

    @property
    def density_columns(self) -> List[str]:
        return [k for k in self.rows[0] if k.startswith("density_")]


def load_run(path) -> Run:
    """Load a run from its output directory or its ``metrics.csv``.

    Variant and seed come from the ``run.cfg`` written next to the metrics;
    without one, the variant is inferred from the directory name.
    """
    path = Path(path)
    metrics = path / "metrics.csv" if path.is_dir() else path
    run_dir = metrics.parent
    try:
        rows = read_metrics(metrics)
    except (OSError, ValueError) as exc:
        raise FormatError(f"{metrics}: cannot read metrics ({exc})") from None
    if not rows or "val_acc" not in rows[0]:
        raise FormatError(f"{metrics}: no metrics rows")
    variant, seed = None, 0
    cfg_path = run_dir / "run.cfg"
    if cfg_path.exists():
        cp = configparser.ConfigParser(interpolation=None)
        cp.read(cfg_path)
        variant = cp.get("train", "variant", fallback=None)
        seed = cp.getint("train", "seed", fallback=0)
    if variant is None:
        variant = next((v for v in VARIANTS if v in run_dir.name), "unknown")
    return Run(run_dir.name, canonical_variant(variant) if variant != "unknown" else variant, seed, rows)


def summarize_run(run: Run) -> Dict[str, object]:
    best = best_row(run.rows)
    dens = [best[c] for c in run.density_columns]
    out = {"run": run.name, "variant": run.variant, "seed": run.seed, "best_epoch": int(best["epoch"]),
           "val_acc": best["val_acc"], "unseen_acc": float(np.mean([best[f"acc_{t}"] for t in run.targets])),
           "mac_ratio": best["mac_ratio"], "mean_density": float(np.mean(dens)) if dens else 1.0}
    for t in run.targets:
        out[f"acc_{t}"] = best[f"acc_{t}"]
    return out


def write_comparison(runs: Sequence[Run], path) -> List[Dict[str, object]]:
    summaries = [summarize_run(r) for r in runs]
    extra = []
    for s in summaries:
        extra += [k for k in s if k not in COMPARISON_COLUMNS and k not in extra]
    cols = COMPARISON_COLUMNS + extra
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for s in summaries:
            w.writerow([f"{s[c]:.6f}" if isinstance(s.get(c), float) else s.get(c, "") for c in cols])
    return summaries


def plot_curves(runs: Sequence[Run], out_dir) -> List[Path]:
    """Render accuracy and density curves as PNG files; returns the written paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []
    colors = {v: f"C{i}" for i, v in enumerate(VARIANTS)}

    fig, (ax_val, ax_unseen) = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for run in runs:
        ep = [r["epoch"] for r in run.rows]
        c = colors.get(run.variant, "k")
        ax_val.plot(ep, [r["val_acc"] for r in run.rows], color=c, alpha=0.8, label=run.name)
        unseen = [np.mean([r[f"acc_{t}"] for t in run.targets]) for r in run.rows]
        ax_unseen.plot(ep, unseen, color=c, alpha=0.8, label=run.name)
    ax_val.set(title="source validation accuracy", xlabel="epoch", ylabel="accuracy")
    ax_unseen.set(title="mean unseen-domain accuracy", xlabel="epoch")
    ax_unseen.axhline(0.25, color="grey", lw=0.8, ls="--")
    ax_unseen.legend(fontsize=7)
    fig.tight_layout()
    p = out_dir / "accuracy_curves.png"
    fig.savefig(p, dpi=110)
    plt.close(fig)
    written.append(p)

    gated = [r for r in runs if r.density_columns]
    if gated:
        fig, axes = plt.subplots(1, len(gated), figsize=(4 * len(gated), 3.5), squeeze=False, sharey=True)
        for ax, run in zip(axes[0], gated):
            ep = [r["epoch"] for r in run.rows]
            for col in run.density_columns:
                ax.plot(ep, [r[col] for r in run.rows], lw=1, label=col[len("density_"):])
            ax.plot(ep, [r["mac_ratio"] for r in run.rows], "k--", lw=1.5, label="MAC ratio")
            ax.set(title=run.name, xlabel="epoch", ylim=(0, 1.05))
        axes[0][0].set_ylabel("hard mask density")
        axes[0][-1].legend(fontsize=6)
        fig.tight_layout()
        p = out_dir / "density_curves.png"
        fig.savefig(p, dpi=110)
        plt.close(fig)
        written.append(p)
    return written


def variant_medians(summaries: Sequence[Dict[str, object]], key: str = "unseen_acc") -> Dict[str, float]:
    out = {}
    for v in VARIANTS:
        vals = [s[key] for s in summaries if s["variant"] == v]
        if vals:
            out[v] = float(np.median(vals))
    return out


def write_report(run_paths: Sequence, out_dir, plots: bool = True) -> Dict[str, object]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [load_run(p) for p in run_paths]
    summaries = write_comparison(runs, out_dir / "comparison.csv")
    figures = plot_curves(runs, out_dir) if plots else []
    return {"summaries": summaries, "medians": variant_medians(summaries), "figures": figures}
