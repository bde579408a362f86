"""Summary tables and figures from evaluation records.

Tables are CSV (``,``) or TSV (``\\t``) with floats written via ``repr`` so
identical inputs give identical bytes. Timing never enters these tables.
"""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .sweep import METRIC_KEYS, format_table  # noqa: E402

LABELS = {"ssim": "SSIM", "rmse": "RMSE (K)", "psnr": "PSNR (dB)", "r2": "R²", "suhi_error": "SUHI error"}


def summarize(records: Sequence[dict], by: str) -> list[dict]:
    """Mean metrics per (method, mask parameter ``by``); inf values are skipped."""
    groups = defaultdict(list)
    for r in records:
        groups[(r["method"], r["mask_params"][by])].append(r)
    rows = []
    for (method, value), members in sorted(groups.items()):
        row = {"method": method, by: value, "n": len(members)}
        for k in METRIC_KEYS:
            vals = np.array([m[k] for m in members], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            row[k] = float(vals.mean()) if vals.size else None
            row[f"{k}_std"] = float(vals.std()) if vals.size else None
        rows.append(row)
    return rows


def summary_columns(by: str) -> list[str]:
    cols = ["method", by, "n"]
    for k in METRIC_KEYS:
        cols += [k, f"{k}_std"]
    return cols


def plot_metric_trends(rows: Sequence[dict], by: str, path) -> Path:
    fig, axes = plt.subplots(1, len(METRIC_KEYS), figsize=(3.2 * len(METRIC_KEYS), 3.0))
    methods = sorted({r["method"] for r in rows})
    for ax, key in zip(axes, METRIC_KEYS):
        for m in methods:
            pts = [(r[by], r[key], r[f"{key}_std"]) for r in rows if r["method"] == m and r[key] is not None]
            if not pts:
                continue
            x, y, e = map(np.array, zip(*pts))
            ax.errorbar(x, y, yerr=e, marker="o", capsize=2, label=m)
        ax.set_xlabel("cloud coverage" if by == "coverage" else by)
        ax.set_title(LABELS[key], fontsize=9)
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_error_map(
    truth: np.ndarray,
    mask: np.ndarray,
    recons: dict,
    path,
    title: str = "",
) -> Path:
    """Truth, observed, each reconstruction and its absolute error (hidden pixels only)."""
    n = len(recons)
    fig, axes = plt.subplots(2, n + 1, figsize=(3.0 * (n + 1), 5.6))
    vmin, vmax = float(truth.min()), float(truth.max())
    hidden = mask == 0
    errs = {k: np.where(hidden, np.abs(v - truth), np.nan) for k, v in recons.items()}
    emax = max([float(np.nanmax(e)) for e in errs.values() if np.isfinite(e).any()] or [1.0])

    axes[0, 0].imshow(truth, vmin=vmin, vmax=vmax, cmap="inferno")
    axes[0, 0].set_title("truth")
    axes[1, 0].imshow(np.where(hidden, np.nan, truth), vmin=vmin, vmax=vmax, cmap="inferno")
    axes[1, 0].set_title("observed")
    for j, (name, rec) in enumerate(recons.items(), start=1):
        im = axes[0, j].imshow(rec, vmin=vmin, vmax=vmax, cmap="inferno")
        axes[0, j].set_title(name)
        em = axes[1, j].imshow(errs[name], vmin=0, vmax=emax, cmap="viridis")
        rmse = float(np.sqrt(np.nanmean(errs[name] ** 2))) if hidden.any() else 0.0
        axes[1, j].set_title(f"|error|, RMSE {rmse:.2f} K", fontsize=9)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.colorbar(im, ax=axes[0, :].tolist(), shrink=0.8, label="LST (K)")
    fig.colorbar(em, ax=axes[1, :].tolist(), shrink=0.8, label="K")
    if title:
        fig.suptitle(title)
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_report(records: Sequence[dict], out_dir, delimiter: str = ",", error_maps: Optional[list] = None) -> dict:
    """Write summary tables and trend plots; returns the produced paths by name.

    ``error_maps`` is a list of ``(name, truth, mask, {method: recon})``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = "tsv" if delimiter == "\t" else "csv"
    paths = {}
    for by in ("coverage", "octaves"):
        rows = summarize(records, by)
        p = out / f"metrics_by_{by}.{ext}"
        p.write_text(format_table(rows, summary_columns(by), delimiter))
        paths[f"table_{by}"] = p
        paths[f"plot_{by}"] = plot_metric_trends(rows, by, out / f"metrics_vs_{by}.png")
    by_cond = defaultdict(list)
    for r in records:
        mp = r["mask_params"]
        by_cond[(r["method"], mp["coverage"], mp["octaves"], mp["wind_deg"])].append(r)
    cond_rows = []
    for (method, cc, oc, wd), members in sorted(by_cond.items()):
        row = {"method": method, "coverage": cc, "octaves": oc, "wind_deg": wd, "n": len(members)}
        for k in METRIC_KEYS:
            vals = np.array([m[k] for m in members], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            row[k] = float(vals.mean()) if vals.size else None
        cond_rows.append(row)
    p = out / f"metrics_by_condition.{ext}"
    p.write_text(format_table(cond_rows, ["method", "coverage", "octaves", "wind_deg", "n", *METRIC_KEYS], delimiter))
    paths["table_condition"] = p
    for name, truth, mask, recons in error_maps or []:
        paths[f"error_map_{name}"] = plot_error_map(truth, mask, recons, out / f"error_map_{name}.png", title=name)
    return paths


def plot_ns_heatmaps(ranked: Sequence[dict], grid, path) -> Path:
    """One (infer_steps x stride) NS heatmap per (coverage, octaves) cell."""
    cells = grid.cells()
    ncol = len(grid.octaves)
    nrow = len(grid.coverages)
    fig, axes = plt.subplots(nrow, ncol, figsize=(2.8 * ncol, 2.6 * nrow), squeeze=False)
    lookup = {(r["coverage"], r["octaves"], r["infer_steps"], r["stride"]): r.get("ns") for r in ranked}
    for (cc, oc), ax in zip(cells, axes.ravel()):
        z = np.array(
            [[lookup.get((cc, oc, n, s)) if lookup.get((cc, oc, n, s)) is not None else np.nan for s in grid.strides]
             for n in grid.infer_steps],
            dtype=float,
        )
        ax.imshow(z, vmin=0, vmax=1, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(grid.strides)), [str(s) for s in grid.strides])
        ax.set_yticks(range(len(grid.infer_steps)), [str(n) for n in grid.infer_steps])
        ax.set_title(f"cc {cc:g}, octaves {oc}", fontsize=9)
        ax.set_xlabel("stride")
        ax.set_ylabel("steps")
        for i in range(z.shape[0]):
            for j in range(z.shape[1]):
                if np.isfinite(z[i, j]):
                    ax.text(j, i, f"{z[i, j]:.2f}", ha="center", va="center", fontsize=7, color="w")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
