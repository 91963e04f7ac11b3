"""Run artifacts: metrics CSV, report JSON, and static SVG figures.

All files are written atomically (temp + rename) so interrupted runs never
leave half-written artifacts. Float formatting uses 17 significant digits,
which round-trips float64 exactly and keeps identical runs byte-identical.
"""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .trainer import AccuracyMatrix

__all__ = [
    "write_metrics_csv",
    "write_report_json",
    "write_rows_csv",
    "render_accuracy_figure",
    "render_sweep_figure",
    "render_ablation_figure",
]


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".out-tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_metrics_csv(path: str, matrix: AccuracyMatrix, domain_names: list[str]) -> None:
    """Stage-by-domain grid plus both seen-domain stage accuracies."""
    if len(domain_names) != matrix.num_domains:
        raise ValueError("domain name count does not match the accuracy grid")
    header = ["stage"] + [f"acc_{n}" for n in domain_names] + ["seen_pooled_acc", "seen_mean_acc"]
    lines = [",".join(header)]
    for t in range(matrix.num_tasks):
        row = [str(t)] + [_fmt(v) for v in matrix.acc[t]]
        row += [_fmt(matrix.stage_acc[t]), _fmt(matrix.stage_acc_mean[t])]
        lines.append(",".join(row))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def write_report_json(path: str, report: dict) -> None:
    payload = json.dumps(report, indent=2, sort_keys=True) + "\n"
    _atomic_write(path, payload.encode("utf-8"))


def write_rows_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in columns))
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _save_figure(fig, path: str) -> None:
    import io

    buf = io.BytesIO()
    fig.savefig(buf, format=os.path.splitext(path)[1].lstrip(".") or "svg")
    _atomic_write(path, buf.getvalue())


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_accuracy_figure(path: str, matrix: AccuracyMatrix, domain_names: list[str]) -> None:
    """Per-domain accuracy over stages plus the pooled seen-domain curve."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(7, 4.5))
    stages = np.arange(matrix.num_tasks)
    for d, name in enumerate(domain_names):
        style = "--" if name.startswith("unseen") else "-"
        ax.plot(stages, matrix.acc[:, d], style, alpha=0.6, label=name)
    ax.plot(stages, matrix.stage_acc, "k-", linewidth=2.5, label="seen (pooled)")
    ax.set_xlabel("stage")
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    _save_figure(fig, path)
    plt.close(fig)


def render_sweep_figure(path: str, rows: list[dict], fixed_q: float, fixed_lam: float) -> None:
    """Two panels: Avg vs q (lam fixed) and Avg vs lam (q fixed)."""
    plt = _plt()
    fig, (ax_q, ax_l) = plt.subplots(1, 2, figsize=(8, 3.5))
    q_rows = sorted((r for r in rows if r["lam"] == fixed_lam), key=lambda r: r["q"])
    l_rows = sorted((r for r in rows if r["q"] == fixed_q), key=lambda r: r["lam"])
    ax_q.plot([r["q"] for r in q_rows], [r["avg"] for r in q_rows], "o-")
    ax_q.set_xlabel("q")
    ax_q.set_ylabel("Avg")
    ax_l.plot([r["lam"] for r in l_rows], [r["avg"] for r in l_rows], "s-")
    ax_l.set_xlabel("lambda")
    ax_l.set_ylabel("Avg")
    fig.tight_layout()
    _save_figure(fig, path)
    plt.close(fig)


def render_ablation_figure(path: str, rows: list[dict]) -> None:
    """Mean Avg per component row."""
    plt = _plt()
    labels, means = [], []
    for label in dict.fromkeys(r["row"] for r in rows):
        vals = [r["avg"] for r in rows if r["row"] == label]
        labels.append(label)
        means.append(float(np.mean(vals)))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(len(labels)), means)
    ax.set_xticks(range(len(labels)), labels, rotation=15)
    ax.set_ylabel("mean Avg")
    fig.tight_layout()
    _save_figure(fig, path)
    plt.close(fig)
