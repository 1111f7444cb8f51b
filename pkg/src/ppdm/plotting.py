"""Figures for evaluation reports, rendered to files with the Agg canvas."""
from __future__ import annotations

from pathlib import Path

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluator import EvalReport, format_class

# Fixed metadata keeps PNG bytes stable across runs.
_PNG_META = {"Software": None}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    return path


def plot_pr_curves(report: EvalReport, path, max_classes: int = 12) -> Path:
    """Precision/recall step curves for the classes with the most ground truth."""
    fig = Figure(figsize=(6, 4.5))
    ax = fig.add_subplot()
    keys = sorted(report.curves, key=lambda k: (-report.n_gt[k], str(k)))[:max_classes]
    drawn = 0
    for key in keys:
        rec, prec = report.curves[key]
        if len(rec) == 0:
            continue
        drawn += 1
        ax.step([0.0, *rec], [1.0, *prec], where="post", lw=1.2,
                label=f"{format_class(key)} (AP {report.per_class_ap[key]:.2f})")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.05)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"mAP = {report.mean_ap:.4f}")
    if drawn:
        ax.legend(fontsize=7, loc="lower left", ncol=2)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def plot_class_ap(report: EvalReport, path) -> Path:
    keys = list(report.per_class_ap)
    fig = Figure(figsize=(max(4.0, 0.25 * len(keys) + 2), 3.5))
    ax = fig.add_subplot()
    ax.bar(range(len(keys)), [report.per_class_ap[k] for k in keys], color="#4c72b0")
    ax.axhline(report.mean_ap, color="#c44e52", ls="--", lw=1, label=f"mAP {report.mean_ap:.3f}")
    if len(keys) <= 40:
        ax.set_xticks(range(len(keys)), [format_class(k) for k in keys], rotation=90, fontsize=6)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("AP")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def render_report_figures(report: EvalReport, report_path) -> list[Path]:
    """Write ``<stem>.pr.png`` and ``<stem>.ap.png`` next to a JSON report."""
    report_path = Path(report_path)
    stem = report_path.with_suffix("")
    return [
        plot_pr_curves(report, f"{stem}.pr.png"),
        plot_class_ap(report, f"{stem}.ap.png"),
    ]
