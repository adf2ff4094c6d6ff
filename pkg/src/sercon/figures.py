"""Report figures: confusion-matrix heatmaps and stage summaries.

Rendered to PNG next to the JSON/CSV reports.  matplotlib is imported
lazily with the Agg backend so headless runs and library users that never
plot don't pay for it.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

_STAGE_ORDER = ("S1", "S2+knn(noscl)", "S2", "S3")


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def stage_slug(stage: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", stage.lower()).strip("_")


def render_confusion(stage: str, report: dict, labels: list[str], path: Path) -> None:
    """Row-normalised confusion heatmap; cell text shows per-class recall."""
    plt = _plt()
    conf = np.asarray(report["confusion"], dtype=np.float64)
    row_sums = conf.sum(axis=1, keepdims=True)
    norm = np.divide(conf, row_sums, out=np.zeros_like(conf), where=row_sums > 0)
    fig, ax = plt.subplots(figsize=(4.2, 3.6))
    im = ax.imshow(norm, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(len(labels)), labels, rotation=45, ha="right")
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    title = f"{stage}  WA={report['wa']:.3f}  UA={report['ua']:.3f}"
    ax.set_title(title, fontsize=10)
    for i in range(len(labels)):
        for j in range(len(labels)):
            color = "white" if norm[i, j] > 0.5 else "black"
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", color=color, fontsize=8)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_stage_summary(stages: dict[str, dict], path: Path) -> None:
    plt = _plt()
    keys = [k for k in _STAGE_ORDER if k in stages]
    wa = [stages[k]["wa"] for k in keys]
    ua = [stages[k]["ua"] for k in keys]
    x = np.arange(len(keys))
    fig, ax = plt.subplots(figsize=(5.2, 3.4))
    ax.bar(x - 0.18, wa, width=0.36, label="WA", color="#3b6ea5")
    ax.bar(x + 0.18, ua, width=0.36, label="UA", color="#d08a3e")
    ax.set_xticks(x, keys, rotation=15)
    ax.set_ylim(0.0, 1.0)
    ax.set_ylabel("accuracy")
    ax.set_title("staged evaluation", fontsize=10)
    ax.legend(loc="lower right", fontsize=8)
    for xi, (w, u) in enumerate(zip(wa, ua)):
        ax.text(xi - 0.18, w + 0.01, f"{w:.3f}", ha="center", fontsize=7)
        ax.text(xi + 0.18, u + 0.01, f"{u:.3f}", ha="center", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_embedding_ratio(ratios: dict[str, float], path: Path) -> None:
    plt = _plt()
    keys = ["ce", "scl"]
    names = ["cross-entropy only", "with contrastive term"]
    vals = [ratios[k] for k in keys]
    fig, ax = plt.subplots(figsize=(4.0, 3.2))
    ax.bar(names, vals, width=0.5, color=["#888888", "#3b6ea5"])
    ax.set_ylabel("inter/intra class distance ratio")
    ax.set_title("embedding separation (test data)", fontsize=10)
    for i, v in enumerate(vals):
        ax.text(i, v, f"{v:.3f}", ha="center", va="bottom", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def render_report_figures(report: dict, out_dir: str | Path) -> list[Path]:
    """Render every figure the report supports; returns the written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    labels = report.get("labels", [])
    written: list[Path] = []
    stages = report.get("stages")
    if stages:
        for stage, stage_report in stages.items():
            p = out_dir / f"confusion_{stage_slug(stage)}.png"
            render_confusion(stage, stage_report, labels, p)
            written.append(p)
        p = out_dir / "stage_summary.png"
        render_stage_summary(stages, p)
        written.append(p)
    if "embedding_ratio_mean" in report:
        p = out_dir / "embedding_ratio.png"
        render_embedding_ratio(report["embedding_ratio_mean"], p)
        written.append(p)
    # Single-evaluation report (one confusion matrix at top level).
    if "confusion" in report:
        p = out_dir / "confusion.png"
        render_confusion(report.get("stage", "evaluation"), report, labels, p)
        written.append(p)
    return written
