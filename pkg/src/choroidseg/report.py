"""Reporting: comparison tables across runs, metric figures, loss curves, and
per-image boundary overlays.

Figures are rendered with matplotlib to files; tables are printed aligned and
written tab-delimited next to them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import DataError
from .metrics import MetricReport, lower_boundary
from .trainer import CONFIG_ECHO_NAME, EVAL_REPORT_NAME, LOG_NAME


@dataclass
class RunSummary:
    run_dir: Path
    mode: str
    step: int
    report: MetricReport


def load_run(run_dir: str | Path) -> RunSummary:
    """Read one run directory's final evaluation and mode tag."""
    run_dir = Path(run_dir)
    eval_path = run_dir / EVAL_REPORT_NAME
    if not eval_path.is_file():
        raise DataError(f"run dir {run_dir} has no {EVAL_REPORT_NAME} (training unfinished?)")
    data = json.loads(eval_path.read_text())
    mode = data.get("mode")
    if mode is None:
        config_path = run_dir / CONFIG_ECHO_NAME
        mode = json.loads(config_path.read_text())["mode"] if config_path.is_file() else "?"
    return RunSummary(
        run_dir=run_dir,
        mode=mode,
        step=int(data.get("step", -1)),
        report=MetricReport.from_dict(data["report"]),
    )


def comparison_rows(
    runs: Sequence[RunSummary], oracle: Optional[RunSummary] = None
) -> list[dict]:
    """Table rows (method, ausde, iou, and gap columns when an oracle is given)."""
    rows = []
    for run in runs:
        report = run.report.with_gap(oracle.report) if oracle is not None else run.report
        row = {
            "method": run.mode,
            "ausde": report.ausde,
            "iou": report.iou,
            "run_dir": str(run.run_dir),
        }
        if oracle is not None:
            row["gap_ausde"] = report.gap_ausde
            row["gap_iou"] = report.gap_iou
        rows.append(row)
    return rows


def format_table(rows: Sequence[dict]) -> str:
    """Aligned text table; IOU is shown in percent to match how it is compared."""
    has_gap = rows and "gap_ausde" in rows[0]
    headers = ["method", "AUSDE(px)", "IOU(%)"]
    if has_gap:
        headers += ["GAP_ausde", "GAP_iou"]
    body = []
    for row in rows:
        cells = [row["method"], f"{row['ausde']:.2f}", f"{100.0 * row['iou']:.2f}"]
        if has_gap:
            cells += [f"{row['gap_ausde']:.2f}", f"{100.0 * row['gap_iou']:.2f}"]
        body.append(cells)
    widths = [max(len(h), *(len(r[i]) for r in body)) if body else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for cells in body:
        lines.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
    return "\n".join(lines)


def write_table_tsv(rows: Sequence[dict], path: str | Path) -> None:
    has_gap = rows and "gap_ausde" in rows[0]
    columns = ["method", "ausde", "iou"] + (["gap_ausde", "gap_iou"] if has_gap else []) + ["run_dir"]
    lines = ["\t".join(columns)]
    for row in rows:
        lines.append("\t".join(str(row[c]) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")


def render_metric_comparison(rows: Sequence[dict], path: str | Path) -> None:
    """Two-panel bar chart of AUSDE (lower better) and IOU (higher better)."""
    methods = [r["method"] for r in rows]
    fig, (ax_ausde, ax_iou) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax_ausde.bar(methods, [r["ausde"] for r in rows], color="#c44e52")
    ax_ausde.set_ylabel("AUSDE (px)")
    ax_ausde.set_title("lower boundary error ↓")
    ax_iou.bar(methods, [100.0 * r["iou"] for r in rows], color="#4c72b0")
    ax_iou.set_ylabel("IOU (%)")
    ax_iou.set_ylim(0, 100)
    ax_iou.set_title("region overlap ↑")
    for ax in (ax_ausde, ax_iou):
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def read_log(log_path: str | Path) -> list[dict]:
    records = []
    with open(log_path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(json.loads(line))
    return records


def render_loss_curves(run_dir: str | Path, path: str | Path) -> bool:
    """Plot loss components and validation IOU over steps; False if no log."""
    log_path = Path(run_dir) / LOG_NAME
    if not log_path.is_file():
        return False
    records = read_log(log_path)
    losses = [r for r in records if r.get("type") == "loss"]
    evals = [r for r in records if r.get("type") == "eval"]
    if not losses:
        return False
    steps = [r["step"] for r in losses]
    fig, (ax_loss, ax_iou) = plt.subplots(1, 2, figsize=(10, 3.5))
    for key, label in (("seg", "segmentation"), ("adv_gen", "adversarial (G)"),
                       ("per", "perceptual"), ("disc", "discriminator")):
        values = [r[key] for r in losses]
        if any(v != 0.0 for v in values):
            ax_loss.plot(steps, values, label=label, linewidth=0.8)
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("step")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    if evals:
        ax_iou.plot([r["step"] for r in evals], [100.0 * r["iou"] for r in evals],
                    marker="o", markersize=3)
    ax_iou.set_xlabel("step")
    ax_iou.set_ylabel("val IOU (%)")
    ax_iou.set_ylim(0, 100)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def _upper_boundary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    any_col = mask.any(axis=0)
    first = np.argmax(mask, axis=0)
    return np.where(any_col, first.astype(float), np.nan)


def render_overlay(
    image: np.ndarray,
    ref_mask: np.ndarray,
    pred_mask: np.ndarray,
    path: str | Path,
    title: str = "",
) -> None:
    """Draw reference (green) and predicted (red) band boundaries over the input."""
    fig, ax = plt.subplots(figsize=(4, 4 * image.shape[0] / image.shape[1]))
    ax.imshow(image, cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
    x = np.arange(image.shape[1])
    for mask, color, label in ((ref_mask, "#2ca02c", "reference"), (pred_mask, "#d62728", "predicted")):
        ax.plot(x, _upper_boundary(mask), color=color, linewidth=1.0,
                label=label, alpha=0.9)
        ax.plot(x, lower_boundary(mask), color=color, linewidth=1.0, alpha=0.9)
    ax.legend(fontsize=7, loc="lower right")
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
