"""Figures for experiment reports (files only, no display)."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0


def _style():
    plt.rcParams.update({
        "font.size": 9,
        "axes.spines.right": False,
        "axes.spines.top": False,
        "savefig.dpi": 120,
        "svg.hashsalt": "trinity",
    })


def _figure(width=6.0):
    return plt.subplots(figsize=(width, width * GOLDEN))


def _ok(table):
    return {k: v for k, v in table["variants"].items() if v.get("status") == "ok"}


def plot_auc_bars(table, path, slices=("classic", "copilot")):
    """Grouped bars of mean test AUC per variant and slice."""
    _style()
    variants = _ok(table)
    fig, ax = _figure()
    width = 0.8 / max(len(slices), 1)
    names = list(variants)
    for j, s in enumerate(slices):
        vals = [(variants[n]["mean"].get(s) or {}).get("auc") or math.nan for n in names]
        ax.bar([i + j * width for i in range(len(names))], vals, width, label=s)
    ax.set_xticks([i + width * (len(slices) - 1) / 2 for i in range(len(names))])
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.set_ylabel("mean test AUC")
    finite = [(variants[n]["mean"].get(s) or {}).get("auc") for n in names for s in slices]
    finite = [v for v in finite if v is not None]
    if finite:
        ax.set_ylim(max(0.0, min(finite) - 0.05), min(1.0, max(finite) + 0.02))
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_daily(table, path, slice_name="copilot", metric="auc"):
    """Per-day metric trajectories, one line per variant."""
    _style()
    fig, ax = _figure()
    for name, v in _ok(table).items():
        days = [p["day"] for p in v["per_day"]]
        vals = [((p["slices"].get(slice_name) or {}).get(metric)) for p in v["per_day"]]
        ax.plot(days, [math.nan if x is None else x for x in vals], marker="o", label=name)
    if metric == "copc":
        ax.axhline(1.0, color="0.6", lw=0.8, ls="--")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("day")
    ax.set_ylabel(f"{slice_name} {metric.upper()}")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_report(table, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [plot_auc_bars(table, out / "auc_by_variant.png")]
    for s in ("classic", "copilot"):
        for m in ("auc", "copc"):
            paths.append(plot_daily(table, out / f"daily_{s}_{m}.png", s, m))
    return paths
