"""Report rendering: delimited tables, aligned text tables, and figures.

Every report path writes a machine-readable CSV next to a human-readable
text table, plus a matplotlib figure rendered to PNG.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .core import ClassTaxonomy
from .metrics import MetricsReport


def _fmt(value: float, digits: int = 4) -> str:
    if value is None or not np.isfinite(value):
        return "--"
    return f"{value:.{digits}f}"


def metrics_to_csv(report: MetricsReport, taxonomy: ClassTaxonomy) -> str:
    lines = ["class_id,class_name,cpa,iou,support"]
    for cid in range(taxonomy.num_classes):
        cpa = "" if not np.isfinite(report.cpa[cid]) else repr(float(report.cpa[cid]))
        iou = "" if not np.isfinite(report.iou[cid]) else repr(float(report.iou[cid]))
        lines.append(
            f"{cid},{taxonomy.name_of(cid)},{cpa},{iou},{int(report.support[cid])}"
        )
    mean_cpa = "" if not np.isfinite(report.mean_cpa) else repr(float(report.mean_cpa))
    mean_iou = "" if not np.isfinite(report.mean_iou) else repr(float(report.mean_iou))
    fg_support = sum(int(report.support[c]) for c in taxonomy.foreground_ids())
    lines.append(f",mean,{mean_cpa},{mean_iou},{fg_support}")
    return "\n".join(lines) + "\n"


def metrics_table_text(report: MetricsReport, taxonomy: ClassTaxonomy) -> str:
    """Aligned table, one column per non-background class plus a Mean column."""
    names = [taxonomy.name_of(c) for c in taxonomy.foreground_ids()]
    headers = ["metric"] + names + ["Mean"]
    cpa_row = ["CPA"] + [
        _fmt(report.cpa[c]) for c in taxonomy.foreground_ids()
    ] + [_fmt(report.mean_cpa)]
    iou_row = ["IoU"] + [
        _fmt(report.iou[c]) for c in taxonomy.foreground_ids()
    ] + [_fmt(report.mean_iou)]
    support_row = ["support"] + [
        str(int(report.support[c])) for c in taxonomy.foreground_ids()
    ] + [str(sum(int(report.support[c]) for c in taxonomy.foreground_ids()))]
    widths = [
        max(len(row[i]) for row in (headers, cpa_row, iou_row, support_row))
        for i in range(len(headers))
    ]

    def render(row):
        return "  ".join(cell.rjust(w) for cell, w in zip(row, widths))

    rule = "-" * (sum(widths) + 2 * (len(widths) - 1))
    return "\n".join([render(headers), rule, render(cpa_row), render(iou_row),
                      render(support_row)]) + "\n"


def plot_metrics(report: MetricsReport, taxonomy: ClassTaxonomy, path: str | Path) -> None:
    fg = list(taxonomy.foreground_ids())
    names = [taxonomy.name_of(c) for c in fg]
    cpa = np.nan_to_num(report.cpa[fg], nan=0.0)
    iou = np.nan_to_num(report.iou[fg], nan=0.0)
    x = np.arange(len(fg))
    fig, ax = plt.subplots(figsize=(9, 4))
    ax.bar(x - 0.2, cpa, width=0.4, label="CPA", color="#4878cf")
    ax.bar(x + 0.2, iou, width=0.4, label="IoU", color="#6acc65")
    if np.isfinite(report.mean_cpa):
        ax.axhline(report.mean_cpa, color="#4878cf", ls="--", lw=1,
                   label=f"mPA {report.mean_cpa:.3f}")
    if np.isfinite(report.mean_iou):
        ax.axhline(report.mean_iou, color="#6acc65", ls="--", lw=1,
                   label=f"mIoU {report.mean_iou:.3f}")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend(loc="upper right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_metrics_report(
    report: MetricsReport,
    taxonomy: ClassTaxonomy,
    out_dir: str | Path,
    stem: str = "metrics",
) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out_dir / f"{stem}.csv",
        "txt": out_dir / f"{stem}.txt",
        "png": out_dir / f"{stem}.png",
    }
    paths["csv"].write_text(metrics_to_csv(report, taxonomy))
    paths["txt"].write_text(metrics_table_text(report, taxonomy))
    plot_metrics(report, taxonomy, paths["png"])
    return paths


def plot_training_curves(rows, path: str | Path) -> None:
    """Loss components and learning rate against the step counter."""
    if not rows:
        return
    steps = [r.step for r in rows]
    seg = [r.seg_loss for r in rows]
    bnd = [r.boundary_loss for r in rows]
    total = [r.total_loss for r in rows]
    lr = [r.learning_rate for r in rows]
    fig, (ax1, ax2) = plt.subplots(
        2, 1, figsize=(8, 6), sharex=True, gridspec_kw={"height_ratios": [3, 1]}
    )
    ax1.plot(steps, total, label="total", color="#333333")
    ax1.plot(steps, seg, label="segmentation", color="#4878cf")
    ax1.plot(steps, bnd, label="boundary", color="#d65f5f")
    if all(v > 0 for v in seg + bnd + total):
        ax1.set_yscale("log")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)
    ax2.plot(steps, lr, color="#956cb4")
    ax2.set_ylabel("lr")
    ax2.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def class_stats_to_csv(counts: np.ndarray, taxonomy: ClassTaxonomy) -> str:
    total = int(counts.sum())
    lines = ["class_id,class_name,pixels,fraction"]
    for cid in range(taxonomy.num_classes):
        frac = counts[cid] / total if total else 0.0
        lines.append(f"{cid},{taxonomy.name_of(cid)},{int(counts[cid])},{frac!r}")
    return "\n".join(lines) + "\n"


def class_stats_table(counts: np.ndarray, taxonomy: ClassTaxonomy) -> str:
    total = int(counts.sum())
    name_w = max(len(n) for n in taxonomy.names) + 2
    lines = [f"{'class'.ljust(name_w)}{'pixels':>12}  {'fraction':>9}"]
    lines.append("-" * (name_w + 23))
    for cid in range(taxonomy.num_classes):
        frac = counts[cid] / total if total else 0.0
        lines.append(
            f"{taxonomy.name_of(cid).ljust(name_w)}{int(counts[cid]):>12}  {frac:>9.5f}"
        )
    lines.append("-" * (name_w + 23))
    lines.append(f"{'total'.ljust(name_w)}{total:>12}")
    return "\n".join(lines) + "\n"


def plot_class_distribution(counts: np.ndarray, taxonomy: ClassTaxonomy,
                            path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    x = np.arange(taxonomy.num_classes)
    ax.bar(x, counts, color="#4878cf")
    ax.set_xticks(x)
    ax.set_xticklabels(taxonomy.names, rotation=30, ha="right")
    ax.set_ylabel("pixels")
    if counts.max() > 0:
        ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
