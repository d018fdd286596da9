"""Per-layer sparsity tables and shrinkage curves, as CSV plus figures.

Every report is written twice: a delimited file for downstream tooling
and a rendered PNG next to it.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .nn import Model, sparsity_report  # noqa: E402


def write_layer_csv(rows: list[tuple[str, int, int, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "total", "nonzero", "remaining_pct"])
        for name, total, nonzero, pct in rows:
            writer.writerow([name, total, nonzero, f"{pct:.4f}"])
    return path


def layer_figure(rows: list[tuple[str, int, int, float]], path: str | Path, title: str = "") -> Path:
    """Horizontal bar chart of remaining-weight percentage per layer."""
    layers = [(name, pct) for name, _, _, pct in rows if name != "TOTAL"]
    names = [name for name, _ in layers]
    pcts = [pct for _, pct in layers]
    fig, ax = plt.subplots(figsize=(6, 0.6 * len(names) + 1.5))
    ax.barh(range(len(names)), pcts, color="#3b6ea5")
    ax.set_yticks(range(len(names)), names)
    ax.invert_yaxis()
    ax.set_xlabel("Remaining weights (%)")
    ax.set_xlim(0, 100)
    for i, pct in enumerate(pcts):
        ax.text(min(pct + 1, 92), i, f"{pct:.2f}%", va="center", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_history_csv(history: list[tuple[int, int, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "n_active", "loss"])
        for step, n_active, loss in history:
            writer.writerow([step, n_active, f"{loss:.6f}"])
    return path


def shrinkage_figure(
    cells: dict[tuple[float, float], list[tuple[int, int, float]]],
    path: str | Path,
) -> Path:
    """Active-mask count vs. step, one panel per learning rate."""
    lrs = sorted({lr for _, lr in cells})
    fig, axes = plt.subplots(1, len(lrs), figsize=(5 * len(lrs), 4), squeeze=False)
    for ax, lr in zip(axes[0], lrs):
        for (alpha, cell_lr), history in sorted(cells.items()):
            if cell_lr != lr or not history:
                continue
            steps = [s for s, _, _ in history]
            counts = [n for _, n, _ in history]
            ax.plot(steps, counts, label=f"alpha={alpha:g}")
        ax.set_title(f"lr={lr:g}")
        ax.set_xlabel("step")
        ax.set_ylabel("active masks")
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def report_layers(model: Model, out_dir: str | Path, stem: str = "layers") -> list:
    """CSV + PNG pair for the model's per-layer sparsity."""
    rows = sparsity_report(model)
    out_dir = Path(out_dir)
    write_layer_csv(rows, out_dir / f"{stem}.csv")
    layer_figure(rows, out_dir / f"{stem}.png", title=model.arch)
    return rows
