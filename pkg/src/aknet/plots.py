"""SVG line charts rebuilt from a ``results.csv`` file alone."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "aknet"
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_results"]


def _style(filter_name, source):
    if filter_name == "KF":
        return dict(ls="--", marker="o", label="KF")
    if filter_name == "adaptive-KF":
        return dict(ls="-.", marker="s", label="adaptive KF (corr)")
    return dict(ls="-", marker="^", label=f"AKNet ({source})")


def plot_results(results_csv, out_dir) -> list[Path]:
    """Write the panels for whatever experiment ``results_csv`` holds; returns the paths."""
    from .harness import ResultTable

    table = ResultTable.read_csv(results_csv)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if table.select(panel="jump"):
        written.append(_jump_plot(table, out_dir / "jump.svg"))
    if table.select(panel="scaled") or table.select(panel="trained"):
        written.append(_scaled_plot(table, out_dir / "same_ratio.svg"))
    if table.select(panel="ratio"):
        written.append(_ratio_plot(table, out_dir / "ratio.svg"))
    return written


def _lines(rows):
    out = {}
    for r in rows:
        out.setdefault((r.filter, r.sow_source), []).append(r)
    return out


def _ratio_plot(table, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (name, src), rows in _lines(table.select(panel="ratio")).items():
        rows = sorted(rows, key=lambda r: r.sow)
        ax.plot([r.sow for r in rows], [r.mse_db for r in rows], **_style(name, src))
    for r in table.select(panel="trained", filter="AKNet"):
        ax.plot(r.sow, r.mse_db, "ko", mfc="none", ms=9)
    ax.set_xscale("log")
    ax.set_xlabel("noise ratio q2/r2")
    ax.set_ylabel("MSE [dB]")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _scaled_plot(table, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    rows = table.select(panel="scaled") + table.select(panel="trained")
    ratios = sorted({round(np.log10(r.sow), 6) for r in rows})
    colors = plt.cm.viridis(np.linspace(0, 0.9, len(ratios)))
    for color, lr in zip(colors, ratios):
        for name in ("KF", "AKNet"):
            sel = sorted((r for r in rows if r.filter == name and round(np.log10(r.sow), 6) == lr),
                         key=lambda r: r.r2)
            if not sel:
                continue
            ax.plot([1.0 / r.r2 for r in sel], [r.mse_db for r in sel],
                    ls="--" if name == "KF" else "-", marker="o" if name == "KF" else "^",
                    color=color, label=f"{name} ratio 1e{lr:g}")
    ax.set_xscale("log")
    ax.set_xlabel("1 / r2")
    ax.set_ylabel("MSE [dB]")
    ax.legend(fontsize=6, ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _jump_plot(table, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for (name, src), rows in _lines(table.select(panel="jump")).items():
        rows = sorted(rows, key=lambda r: r.r2)
        ax.plot([r.r2 for r in rows], [r.mse_db for r in rows], **_style(name, src))
    ax.set_xscale("log")
    ax.set_xlabel("r2 after jump")
    ax.set_ylabel("post-jump MSE [dB]")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
